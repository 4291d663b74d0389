use crate::action::{object_action_from_field, ActionField};
use crate::scene::EnvState;

/// Advance one frame: every object's velocity gains the sum of the
/// accelerations on its visible pixels, then its position moves by the new
/// velocity. The ground truth is noiseless and the background appearance
/// ignores background accelerations.
pub fn step(state: &EnvState, field: &ActionField, mask: &[i32]) -> EnvState {
    let mut next = state.clone();
    for (k, o) in next.objects.iter_mut().enumerate() {
        let a = object_action_from_field(field, mask, k);
        o.velocity[0] += a[0];
        o.velocity[1] += a[1];
        o.position[0] += o.velocity[0];
        o.position[1] += o.velocity[1];
    }
    next
}
