//! Batch-1 latency measurement and model complexity counting.
//!
//! Op-count formulas per layer kind:
//!
//! | layer | ops |
//! |---|---|
//! | convolution | 2 * k*k * c_in * c_out * h_out * w_out (2 per MAC) |
//! | batch norm | 1 per output element |
//! | activation | 1 per output element |
//! | max pool | k*k per output element |
//! | bilinear resize | 1 per output element |
//! | residual add | 1 per output element |

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{BlazeNeo, Mode};

/// Timed iterations per session.
pub const TIMED_ITERATIONS: usize = 100;
pub const DEFAULT_WARMUP: usize = 10;

/// Something the harness can time one input at a time.
pub trait BenchTarget {
    type Input;

    fn infer(&mut self, input: &Self::Input) -> Result<()>;

    /// Blocks until all queued work has finished.
    fn barrier(&mut self) -> Result<()> {
        Ok(())
    }

    /// Device-side time of the last `infer`, when the backend can report it.
    fn last_compute_ms(&mut self) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub median: f64,
}

impl Stats {
    /// Statistics over a non-empty list; the mean sums in ascending order.
    pub fn of(values: &[f64]) -> Stats {
        assert!(!values.is_empty(), "statistics of an empty list");
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        };
        Stats {
            min: v[0],
            max: v[n - 1],
            mean: v.iter().sum::<f64>() / n as f64,
            median,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub latencies_ms: Vec<f64>,
    pub host: Stats,
    pub compute: Option<Stats>,
    pub fps: f64,
    pub warmup_iterations: usize,
    pub hardware: String,
    pub precision: String,
}

impl LatencyReport {
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "hardware={}", self.hardware);
        let _ = writeln!(s, "precision={}", self.precision);
        let _ = writeln!(s, "warmup_iterations={}", self.warmup_iterations);
        let _ = writeln!(s, "iterations={}", self.latencies_ms.len());
        for (k, v) in [
            ("min", self.host.min),
            ("max", self.host.max),
            ("mean", self.host.mean),
            ("median", self.host.median),
        ] {
            let _ = writeln!(s, "host_latency_{k}_ms={v:.4}");
        }
        match &self.compute {
            Some(c) => {
                for (k, v) in [("min", c.min), ("max", c.max), ("mean", c.mean), ("median", c.median)] {
                    let _ = writeln!(s, "compute_time_{k}_ms={v:.4}");
                }
            }
            None => {
                let _ = writeln!(s, "compute_time=absent");
            }
        }
        let _ = writeln!(s, "fps={:.3}", self.fps);
        s
    }

    /// Writes `latency_report.txt` and the raw `latencies_ms.txt` column.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let report = dir.join("latency_report.txt");
        std::fs::write(&report, self.to_kv_text()).map_err(|e| Error::io(&report, e))?;
        let raw = dir.join("latencies_ms.txt");
        let column: String = self.latencies_ms.iter().map(|v| format!("{v}\n")).collect();
        std::fs::write(&raw, column).map_err(|e| Error::io(&raw, e))
    }
}

/// Best-effort CPU model name.
pub fn hardware_name() -> String {
    std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string())
}

/// Runs `warmup` untimed passes, then exactly [`TIMED_ITERATIONS`] timed
/// batch-1 passes over the first inputs. Needs at least that many inputs.
pub fn measure<T: BenchTarget>(
    target: &mut T,
    inputs: &[T::Input],
    warmup: usize,
    precision: &str,
) -> Result<LatencyReport> {
    if inputs.len() < TIMED_ITERATIONS {
        return Err(Error::InvalidInput(format!(
            "latency protocol needs {TIMED_ITERATIONS} inputs, got {}",
            inputs.len()
        )));
    }
    for i in 0..warmup {
        target.infer(&inputs[i % inputs.len()])?;
    }
    target.barrier()?;
    let mut host = Vec::with_capacity(TIMED_ITERATIONS);
    let mut compute = Vec::with_capacity(TIMED_ITERATIONS);
    for input in &inputs[..TIMED_ITERATIONS] {
        target.barrier()?;
        let start = Instant::now();
        target.infer(input)?;
        target.barrier()?;
        host.push(start.elapsed().as_secs_f64() * 1e3);
        if let Some(c) = target.last_compute_ms() {
            compute.push(c);
        }
    }
    let stats = Stats::of(&host);
    Ok(LatencyReport {
        fps: 1000.0 / stats.mean,
        host: stats,
        compute: (compute.len() == host.len()).then(|| Stats::of(&compute)),
        latencies_ms: host,
        warmup_iterations: warmup,
        hardware: hardware_name(),
        precision: precision.to_string(),
    })
}

/// Inference-mode forward of a model on (1, 3, H, W) tensors.
pub struct ModelTarget<'a> {
    pub model: &'a BlazeNeo,
}

impl BenchTarget for ModelTarget<'_> {
    type Input = Tensor;

    fn infer(&mut self, input: &Tensor) -> Result<()> {
        let out = self.model.forward(input, Mode::Infer)?;
        // touch the result so the pass is not optimized into nothing
        std::hint::black_box(out);
        Ok(())
    }
}

/// Stub that sleeps a fixed duration per call; calibrates the harness.
pub struct SleepTarget {
    pub duration: Duration,
}

impl BenchTarget for SleepTarget {
    type Input = ();

    fn infer(&mut self, _: &()) -> Result<()> {
        std::thread::sleep(self.duration);
        Ok(())
    }
}

/// Mean timing cost of the harness itself, from a target that does nothing.
pub fn harness_overhead_ms() -> Result<f64> {
    struct Noop;
    impl BenchTarget for Noop {
        type Input = ();
        fn infer(&mut self, _: &()) -> Result<()> {
            Ok(())
        }
    }
    Ok(measure(&mut Noop, &[(); TIMED_ITERATIONS], DEFAULT_WARMUP, "none")?.host.mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub input_height: usize,
    pub input_width: usize,
    /// Learnable scalars used at inference.
    pub inference_params: usize,
    /// Learnable scalars trained, auxiliary branch included.
    pub training_params: usize,
    pub macs: u64,
    /// 2 * MACs + element-wise ops.
    pub flops: u64,
    pub gflops: f64,
}

impl ComplexityReport {
    pub fn of(model: &BlazeNeo, h: usize, w: usize) -> Result<Self> {
        let ops = model.cost(h, w)?;
        Ok(Self {
            input_height: h,
            input_width: w,
            inference_params: model.inference_param_count(),
            training_params: model.training_param_count(),
            macs: ops.macs,
            flops: ops.flops(),
            gflops: ops.flops() as f64 / 1e9,
        })
    }

    pub fn to_kv_text(&self) -> String {
        format!(
            "input={}x{}\nparams_inference={}\nparams_training={}\nmacs={}\nflops={}\ngflops={:.4}\n",
            self.input_height,
            self.input_width,
            self.inference_params,
            self.training_params,
            self.macs,
            self.flops,
            self.gflops
        )
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("complexity_report.txt");
        std::fs::write(&path, self.to_kv_text()).map_err(|e| Error::io(&path, e))
    }
}
