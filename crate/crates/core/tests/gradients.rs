//! Reverse-mode gradients of every differentiable op against finite
//! differences; the checks themselves live in `common::grad_suite`.

mod common;

use common::grad_suite::{self, Summary};

fn report(s: Vec<Summary>) {
    for x in s {
        eprintln!(
            "{}: worst relative error {:.2e}, {}/{} coordinates at a kink",
            x.name, x.worst, x.kinked, x.total
        );
    }
}

#[test]
fn conv2d_plain_strided_dilated_grouped() {
    report(grad_suite::conv2d_plain_strided_dilated_grouped());
}

#[test]
fn two_layer_conv_net() {
    report(grad_suite::two_layer_conv_net());
}

#[test]
fn linear_layer() {
    report(grad_suite::linear_layer());
}

#[test]
fn batch_norm_train_mode() {
    report(grad_suite::batch_norm_train_mode());
}

#[test]
fn structural_ops() {
    report(grad_suite::structural_ops());
}

#[test]
fn mixed_edge() {
    report(grad_suite::mixed_edge());
}

#[test]
fn cell_forward() {
    report(grad_suite::cell_forward());
}

#[test]
fn search_loss_wrt_arch() {
    report(grad_suite::search_loss_wrt_arch());
}

#[test]
fn relu_and_pools() {
    report(grad_suite::relu_and_pools());
}

#[test]
fn softmax_entropy_cross_entropy() {
    report(grad_suite::softmax_entropy_cross_entropy());
}
