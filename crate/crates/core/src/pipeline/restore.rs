use std::fmt;
use std::time::Instant;

use super::degrade::{degrade, TaskSpec};
use super::metrics::{ImageScore, MetricsReport};
use super::synth::{derive_seed, synth_clean};
use crate::drmlp::Task;
use crate::error::{Error, Result};
use crate::model::{estimate_flops, DRNet, FusedDRNet, Mode};
use crate::tensor::Tensor;

/// Relative agreement required between fused and multi-branch outputs.
pub const EQUIVALENCE_TOL: f64 = 1e-4;

fn clamp01(x: Tensor) -> Tensor {
    x.map(|v| v.clamp(0.0, 1.0))
}

/// Runs a fused model and clamps the result to `[0, 1]`.
pub fn restore(fused: &FusedDRNet, image: &Tensor) -> Result<Tensor> {
    Ok(clamp01(fused.forward(image)?))
}

/// Fuses for each task in order and feeds every output to the next step.
pub fn sequential_restore(m: &DRNet, image: &Tensor, tasks: &[Task]) -> Result<Tensor> {
    if tasks.is_empty() {
        return Err(Error::Contract("sequential restore needs at least one task".into()));
    }
    let mut current = image.clone();
    for &task in tasks {
        let spec = TaskSpec::new(task, m.config().num_tasks)?;
        current = restore(&m.reconfigure(&spec.prior)?, &current)?;
    }
    Ok(current)
}

/// Degraded and restored scores on a held-out synthetic set.
#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub degraded: MetricsReport,
    pub restored: MetricsReport,
}

impl EvalReport {
    pub fn psnr_gain(&self) -> f64 {
        self.restored.mean_psnr() - self.degraded.mean_psnr()
    }
}

/// Scores `restorer` on `n` synthetic `size × size` images corrupted for
/// `task`. Seeds are drawn from a stream disjoint from training.
pub fn evaluate(
    task: Task,
    n: usize,
    size: usize,
    seed: u64,
    mut restorer: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<EvalReport> {
    // the first mixed part tags the held-out stream
    const HELD_OUT: u64 = 0x7E57;
    let spec = TaskSpec::new(task, Task::ALL.len())?;
    let mut report = EvalReport::default();
    for i in 0..n as u64 {
        let clean = synth_clean(derive_seed(seed, &[HELD_OUT, i, 0]), size, size);
        let degraded = degrade(&clean, &spec, derive_seed(seed, &[HELD_OUT, i, 1]))?;
        let restored = restorer(&degraded)?;
        report.degraded.push(ImageScore::measure(&degraded, &clean)?);
        report.restored.push(ImageScore::measure(&restored, &clean)?);
    }
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub task: String,
    pub height: usize,
    pub width: usize,
    pub reps: usize,
    /// Median milliseconds per forward pass.
    pub fused_ms: f64,
    pub unfused_ms: f64,
    /// Operation counts with one multiply-accumulate counted as two.
    pub fused_flops: u64,
    pub unfused_flops: u64,
    /// `max|fused − unfused| / max|unfused|`
    pub rel_error: f64,
    pub equal_output: bool,
}

impl BenchReport {
    pub fn flop_ratio(&self) -> f64 {
        self.fused_flops as f64 / self.unfused_flops as f64
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "task            {}", self.task)?;
        writeln!(f, "input           {}x{}", self.height, self.width)?;
        writeln!(f, "reps            {}", self.reps)?;
        writeln!(f, "fused_ms        {:.3}", self.fused_ms)?;
        writeln!(f, "unfused_ms      {:.3}", self.unfused_ms)?;
        writeln!(f, "fused_flops     {}", self.fused_flops)?;
        writeln!(f, "unfused_flops   {}", self.unfused_flops)?;
        writeln!(f, "flop_ratio      {:.4}", self.flop_ratio())?;
        writeln!(f, "rel_error       {:.3e}", self.rel_error)?;
        write!(f, "equal_output    {}", self.equal_output)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_reps(reps: usize, mut run: impl FnMut() -> Result<Tensor>) -> Result<(f64, Tensor)> {
    let out = run()?; // warmup, not timed
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        run()?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok((median(times), out))
}

/// Times the fused and multi-branch forward on one degraded synthetic image
/// and checks that both produce the same output.
pub fn bench(m: &DRNet, task: Task, h: usize, w: usize, reps: usize) -> Result<BenchReport> {
    if reps < 3 {
        return Err(Error::Contract(format!("bench needs at least 3 reps, got {reps}")));
    }
    let spec = TaskSpec::new(task, m.config().num_tasks)?;
    let x = degrade(&synth_clean(0xBE7C, h, w), &spec, 1)?;
    let fused = m.reconfigure(&spec.prior)?;
    let (fused_ms, a) = time_reps(reps, || fused.forward(&x))?;
    let (unfused_ms, b) = time_reps(reps, || m.forward(&x, &spec.prior))?;
    let rel_error = a.rel_error(&b)?;
    Ok(BenchReport {
        task: task.name().to_string(),
        height: h,
        width: w,
        reps,
        fused_ms,
        unfused_ms,
        fused_flops: estimate_flops(m.config(), h, w, Mode::Fused).flops(),
        unfused_flops: estimate_flops(m.config(), h, w, Mode::Train).flops(),
        rel_error,
        equal_output: rel_error <= EQUIVALENCE_TOL,
    })
}
