#![allow(dead_code)]

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tsca_core::attention::TscaConfig;
use tsca_core::convolution::ConvMode;
use tsca_core::encoder::{Encoder, EncoderConfig};
use tsca_core::oracle::{offline_equivalence, EquivalenceReport};
use tsca_core::streaming::{run_stream, FixedCost, Recorder, StreamSession};
use tsca_core::Real;

pub const DESK_L_ATT: usize = 12;

pub fn features(t: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0))
}

pub fn session<T: Real>(
    enc: &Arc<Encoder<T>>,
    c: usize,
    r: usize,
    l_att: usize,
    mode: ConvMode,
) -> StreamSession<Recorder<tsca_core::encoder::EncoderStream<T>>> {
    let st = enc
        .stream(TscaConfig::new(c, r, l_att).unwrap(), mode)
        .unwrap();
    StreamSession::open(Recorder::new(st), 40.0, Box::new(FixedCost(1.0))).unwrap()
}

/// Streams sub-sampled `frames` and checks against the realized-geometry
/// offline forward.
pub fn equivalence<T: Real>(
    enc: &Arc<Encoder<T>>,
    frames: &Array2<T>,
    c: usize,
    r: usize,
    l_att: usize,
    mode: ConvMode,
) -> EquivalenceReport {
    let mut s = session(enc, c, r, l_att, mode);
    run_stream(&mut s, frames.mapv(Real::to_f64).view()).unwrap();
    let finals = s.model().final_logits();
    offline_equivalence(
        enc,
        frames.view(),
        s.records(),
        c,
        r,
        l_att,
        mode,
        finals.view(),
    )
    .unwrap()
}

pub fn desk_encoder(seed: u64) -> Arc<Encoder<f64>> {
    Arc::new(Encoder::random(&EncoderConfig::default(), seed).unwrap())
}
