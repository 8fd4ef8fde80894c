mod common;

use common::{full_gradient_check, tiny_gradient_check};

#[test]
fn tiny_network_every_parameter() {
    let (seed, checks) = tiny_gradient_check();
    // conv1 2*4+2, conv2 3*2*4+3, dense1 3*15+3, dense2 3+1
    assert_eq!(checks.len(), 10 + 27 + 48 + 4);
    for c in &checks {
        assert!(c.relative_error() < 1e-6, "seed {seed}: {c:?} rel {:e}", c.relative_error());
    }
}

#[test]
fn full_network_sampled_parameters() {
    let (checks, kinks) = full_gradient_check(11, 50);
    assert_eq!(checks.len(), 50);
    assert!(kinks < 25, "{kinks} kinks");
    for c in &checks {
        assert!(c.relative_error() < 1e-4, "{c:?} rel {:e}", c.relative_error());
    }
}
