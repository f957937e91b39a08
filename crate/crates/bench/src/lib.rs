//! Fixtures shared by the benchmarks.

use lengen_core::model::{init_model, ModelConfig, ModelParams, PeKind};
use lengen_core::rng::{stream_rng, Stream};
use lengen_core::taskgen::{make_eval_set, Example, TaskKind, TaskSpec};

/// Addition task of the given width with a model of the given size.
pub fn addition_fixture(
    width: usize,
    depth: usize,
    d_model: usize,
    heads: usize,
    pe: PeKind,
) -> (TaskSpec, ModelParams<f32>) {
    let task = TaskSpec::add_family(TaskKind::Add, width, None).expect("valid task");
    let cfg = ModelConfig::new(depth, d_model, heads, pe, task.input_len(), task.n_out());
    (task, init_model(&cfg, 7).expect("valid model"))
}

/// `count` examples with first operand length `length`.
pub fn examples(task: &TaskSpec, length: usize, count: usize) -> Vec<Example> {
    let mut rng = stream_rng(3, Stream::Eval { step: 0, length: length as u64 });
    make_eval_set(task, length, count, length, &mut rng).examples
}
