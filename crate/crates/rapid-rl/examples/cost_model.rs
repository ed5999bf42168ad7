//! Price training schedules with the affine simulated cost model.
//!
//! Inference cost is a_inf per launched batch plus b_inf per generation;
//! backprop cost is a_bp per step plus b_bp per sample. Resampling before
//! every gradient step pays the per-batch launch cost H times more often
//! than the amortized schedule, which is the entire saving. Run with
//! `cargo run --example cost_model`.

use rapid_rl::{simulated_phase_cost, CostModel};

fn main() -> rapid_rl::Result<()> {
    let model = CostModel::default();
    println!(
        "cost model: inference {}s/batch + {}s/generation, backprop {}s/step + {}s/sample\n",
        model.a_inf, model.b_inf, model.a_bp, model.b_bp
    );

    // One phase: one 256-generation inference batch, then 8 update steps
    // on mini-batches of 32.
    let phase = simulated_phase_cost(&model, 1, 256, 8, 32);
    println!("one 256-generation phase with 8 update steps: {phase:.1}s");
    println!(
        "  inference {:.1}s, backprop {:.1}s\n",
        model.inference_seconds(1, 256),
        model.backprop_seconds(8, 32 * 8)
    );

    // Same 240-step training run under different batch-size ratios. The
    // budget and the per-step batch are fixed; only the resampling
    // cadence changes.
    let steps = 240u64;
    let n_step = 16u64;
    let per_step = steps as f64 * model.inference_seconds(1, n_step);
    println!("240 gradient steps, mini-batches of {n_step}:");
    println!("   H   phases   inference s   vs per-step sampling");
    for h in [1u64, 2, 4, 8, 16] {
        let phases = steps / h;
        let amortized = phases as f64 * model.inference_seconds(1, h * n_step);
        println!(
            "{h:>4}  {phases:>6}  {amortized:>11.1}   {:>17.1}%",
            100.0 * (1.0 - amortized / per_step)
        );
    }

    println!(
        "\nbackprop cost is identical everywhere: {:.1}s",
        steps as f64 * model.backprop_seconds(1, n_step)
    );
    println!("the saving comes from launching fewer, larger inference batches");
    Ok(())
}
