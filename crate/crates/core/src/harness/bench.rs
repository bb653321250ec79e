//! Inference benchmark: analytic cost plus measured throughput.

use std::time::Instant;

use phnet_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::mlpp::{IpMlp, VanillaTokenMixer};
use crate::model::{PhNet, PhnetConfig};
use crate::params::ParamStore;

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub batch: usize,
    pub dims: [usize; 3],
    pub flops: u64,
    pub params: usize,
    /// High-water resident set size, when the platform reports it.
    pub peak_resident_bytes: Option<u64>,
    pub repeats: usize,
    pub seconds: f64,
    /// Samples per second: `batch · repeats / seconds`.
    pub throughput: f64,
}

/// Peak resident memory of this process (`VmHWM` on Linux).
pub fn peak_resident_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Times `repeats` forward passes of a freshly built f32 network on random
/// input, after `warmup` untimed passes.
pub fn bench(cfg: &PhnetConfig, batch: usize, dims: [usize; 3], warmup: usize, repeats: usize) -> Result<BenchReport> {
    if batch == 0 || repeats == 0 {
        return invalid("batch and repeats must be at least 1");
    }
    let net = PhNet::<f32>::build(cfg, 0)?;
    net.check_extents(dims)?;
    let flops = net.count_flops(batch, dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_fn(&[batch, cfg.in_channels, dims[0], dims[1], dims[2]], |_| rng.random_range(-1.0f32..1.0));
    for _ in 0..warmup {
        net.infer(&x)?;
    }
    let start = Instant::now();
    for _ in 0..repeats {
        net.infer(&x)?;
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(BenchReport {
        batch,
        dims,
        flops,
        params: net.count_params(),
        peak_resident_bytes: peak_resident_bytes(),
        repeats,
        seconds,
        throughput: (batch * repeats) as f64 / seconds.max(f64::MIN_POSITIVE),
    })
}

/// In-plane mixing cost of one slice at `h × w` and `2h × w`, for the
/// segmented in-plane MLP and for a dense token mixer over all `h·w`
/// positions.
#[derive(Clone, Debug, Serialize)]
pub struct MixerScaling {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub in_plane: [u64; 2],
    pub dense: [u64; 2],
    pub in_plane_ratio: f64,
    pub dense_ratio: f64,
}

pub fn mixer_scaling(channels: usize, height: usize, width: usize) -> Result<MixerScaling> {
    if channels == 0 || height == 0 || width == 0 {
        return invalid("mixer extents must be positive");
    }
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ip = IpMlp::new(&mut store, &mut rng, "ip", channels);
    let in_plane = [ip.flops(height, width).total(), ip.flops(2 * height, width).total()];
    let small = VanillaTokenMixer::new(&mut store, &mut rng, "dense1", height, width);
    let large = VanillaTokenMixer::new(&mut store, &mut rng, "dense2", 2 * height, width);
    let dense = [small.flops(channels), large.flops(channels)];
    Ok(MixerScaling {
        channels,
        height,
        width,
        in_plane,
        dense,
        in_plane_ratio: in_plane[1] as f64 / in_plane[0] as f64,
        dense_ratio: dense[1] as f64 / dense[0] as f64,
    })
}
