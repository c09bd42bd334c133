mod gradcheck;

#[test]
fn elementwise_ops() {
    gradcheck::elementwise_ops();
}

#[test]
fn shape_and_reduction_ops() {
    gradcheck::shape_and_reduction_ops();
}

#[test]
fn layer_ops() {
    gradcheck::layer_ops();
}

#[test]
fn capsule_ops() {
    gradcheck::capsule_ops();
}

#[test]
fn loss_ops() {
    gradcheck::loss_ops();
}

#[test]
fn routing_chain_gradient() {
    gradcheck::routing_chain_gradient();
}

#[test]
fn micro_capsnet_end_to_end_gradient() {
    assert!(gradcheck::micro_capsnet_end_to_end_gradient() <= 1e-4);
}
