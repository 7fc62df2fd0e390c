mod common;

use common::gradients as g;

#[test]
fn elementwise_and_shape_ops() {
    g::elementwise_and_shape_ops();
}

#[test]
fn matmul_both_operands() {
    g::matmul_both_operands();
}

#[test]
fn layernorm_every_input() {
    g::layernorm_every_input();
}

#[test]
fn cross_entropy_plain_and_masked() {
    g::cross_entropy_plain_and_masked();
}

#[test]
fn detached_paths_carry_no_gradient() {
    g::detached_paths_carry_no_gradient();
}

#[test]
fn prefix_attention_inputs() {
    g::prefix_attention_inputs();
}

#[test]
fn full_prompted_forward_wrt_prompt() {
    g::full_prompted_forward_wrt_prompt();
}

#[test]
fn prompt_formation_inputs() {
    g::prompt_formation_inputs();
}

#[test]
fn qr_profiles_and_loss() {
    g::qr_profiles_and_loss();
}

#[test]
fn full_os_pp_loss_graph() {
    g::full_os_pp_loss_graph();
}

#[test]
fn full_os_pp_loss_graph_topk() {
    g::full_os_pp_loss_graph_topk();
}
