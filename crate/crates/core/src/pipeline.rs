//! UE encode and BS decode chains, plus training-sample preparation.
//!
//! The BS side only ever sees a [`Codeword`] and [`UplinkChannels`]; its
//! shift control is re-derived from the uplink eigenvectors.

use serde::{Deserialize, Serialize};

use crate::bce::enhance_matrix;
use crate::codec::{decode, dequantize, encode, magnitude_map, quantize, Codeword, Frame, ModelParams, TrainSample};
use crate::eigen::eigenvector_matrix;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::ifa::{align, BenchmarkPair, ShiftControl};
use crate::types::{ChannelPair, ComplexMatrix, UplinkChannels};

/// Which optional stages run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PipelineFlags {
    pub bce_on: bool,
    pub ifa_on: bool,
    pub ul_assist_on: bool,
}

impl Default for PipelineFlags {
    fn default() -> Self {
        Self {
            bce_on: true,
            ifa_on: true,
            ul_assist_on: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    Eigen,
    Bce,
    Align,
    Encode,
    Quantize,
    Dequantize,
    UlFusion,
    Decode,
    Restore,
}

/// Ordered record of the stages a pipeline run executed.
pub type Trace = Vec<Stage>;

/// Eigenvector matrix of one link after the optional enhancement.
fn link_eigenvectors(channels: &[ComplexMatrix], flags: PipelineFlags, trace: &mut Trace) -> Result<ComplexMatrix> {
    let (w, reports) = eigenvector_matrix(channels)?;
    trace.push(Stage::Eigen);
    if flags.bce_on {
        trace.push(Stage::Bce);
        Ok(enhance_matrix(channels, &reports)?.enhanced)
    } else {
        Ok(w)
    }
}

/// Codec input frame for one link: aligned angular-delay matrix and its
/// control, or the frequency-domain matrix when alignment is off.
fn link_frame(
    w: &ComplexMatrix,
    bench: &ComplexMatrix,
    flags: PipelineFlags,
    trace: &mut Trace,
) -> Result<(ComplexMatrix, Option<ShiftControl>)> {
    if flags.ifa_on {
        trace.push(Stage::Align);
        let a = align(w, bench)?;
        Ok((a.matrix, Some(a.control)))
    } else {
        Ok((w.clone(), None))
    }
}

fn check_flags(params: &ModelParams, flags: PipelineFlags) -> Result<()> {
    if params.spec.ul_assist != flags.ul_assist_on {
        return Err(Error::InvalidConfig(format!(
            "model ul_assist={} but pipeline ul_assist_on={}",
            params.spec.ul_assist, flags.ul_assist_on
        )));
    }
    Ok(())
}

/// UE side. Returns the codeword and `b_DL`, which stays on the UE.
pub fn ue_encode_pipeline(
    pair: &ChannelPair,
    bench: &BenchmarkPair,
    params: &ModelParams,
    bits: u32,
) -> Result<(Codeword, ShiftControl)> {
    let (c, ctl, _) = ue_encode_traced(pair, bench, params, bits, PipelineFlags::default())?;
    Ok((c, ctl))
}

pub fn ue_encode_traced(
    pair: &ChannelPair,
    bench: &BenchmarkPair,
    params: &ModelParams,
    bits: u32,
    flags: PipelineFlags,
) -> Result<(Codeword, ShiftControl, Trace)> {
    check_flags(params, flags)?;
    let mut trace = Trace::new();
    let w = link_eigenvectors(&pair.dl, flags, &mut trace)?;
    let (x, ctl) = link_frame(&w, &bench.dl, flags, &mut trace)?;
    let z = encode(&x, params)?;
    trace.push(Stage::Encode);
    let c = quantize(&z, bits)?;
    trace.push(Stage::Quantize);
    Ok((c, ctl.unwrap_or(ShiftControl::ZERO), trace))
}

/// BS-side uplink preprocessing: decoder side information and restore frame.
fn uplink_side(
    ul: UplinkChannels<'_>,
    bench: &BenchmarkPair,
    flags: PipelineFlags,
    trace: &mut Trace,
) -> Result<(ndarray::Array2<f64>, Frame)> {
    let w_ul = link_eigenvectors(ul.subbands(), flags, trace)?;
    let (x, ctl) = link_frame(&w_ul, &bench.ul, flags, trace)?;
    let frame = ctl.map_or(Frame::Identity, Frame::Aligned);
    Ok((magnitude_map(&x), frame))
}

/// BS side: reconstructs the (enhanced) DL eigenvector matrix.
pub fn bs_decode_pipeline(
    c: &Codeword,
    ul: UplinkChannels<'_>,
    bench: &BenchmarkPair,
    params: &ModelParams,
) -> Result<ComplexMatrix> {
    Ok(bs_decode_traced(c, ul, bench, params, PipelineFlags::default())?.0)
}

pub fn bs_decode_traced(
    c: &Codeword,
    ul: UplinkChannels<'_>,
    bench: &BenchmarkPair,
    params: &ModelParams,
    flags: PipelineFlags,
) -> Result<(ComplexMatrix, Trace)> {
    check_flags(params, flags)?;
    let mut trace = Trace::new();
    let (ul_mag, frame) = uplink_side(ul, bench, flags, &mut trace)?;
    let z = dequantize(c);
    trace.push(Stage::Dequantize);
    if flags.ul_assist_on {
        trace.push(Stage::UlFusion);
    }
    let x = decode(&z, &ul_mag, params)?;
    trace.push(Stage::Decode);
    if let Frame::Aligned(_) = frame {
        trace.push(Stage::Restore);
    }
    Ok((frame.restore(&x), trace))
}

/// Builds the training/evaluation view of a pair: DL codec input and target
/// from the UE chain, UL side information and restore frame from the BS chain.
pub fn prepare_sample(pair: &ChannelPair, bench: &BenchmarkPair, flags: PipelineFlags) -> Result<TrainSample> {
    let mut trace = Trace::new();
    let target = link_eigenvectors(&pair.dl, flags, &mut trace)?;
    let (input, _) = link_frame(&target, &bench.dl, flags, &mut trace)?;
    let (ul_mag, frame) = uplink_side(pair.uplink(), bench, flags, &mut trace)?;
    Ok(TrainSample {
        input,
        ul_mag,
        target,
        frame,
    })
}

pub fn prepare_samples(
    pairs: &[ChannelPair],
    bench: &BenchmarkPair,
    flags: PipelineFlags,
    exec: Exec,
) -> Result<Vec<TrainSample>> {
    exec.try_map(pairs, |p| prepare_sample(p, bench, flags))
}

/// Copy of `samples` whose uplink maps are cyclically reassigned to other
/// samples, for permutation ablations.
pub fn permute_uplink(samples: &[TrainSample], offset: usize) -> Vec<TrainSample> {
    let n = samples.len();
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| TrainSample {
            ul_mag: samples[(i + offset) % n].ul_mag.clone(),
            ..s.clone()
        })
        .collect()
}

/// Controls derived independently from each link of a pair (with enhancement on).
pub fn link_controls(pair: &ChannelPair, bench: &BenchmarkPair) -> Result<(ShiftControl, ShiftControl)> {
    let flags = PipelineFlags::default();
    let mut trace = Trace::new();
    let dl = link_eigenvectors(&pair.dl, flags, &mut trace)?;
    let ul = link_eigenvectors(&pair.ul, flags, &mut trace)?;
    Ok((align(&dl, &bench.dl)?.control, align(&ul, &bench.ul)?.control))
}

/// Eigenvector matrices `(W_DL, W_UL)` of a pair, enhanced or not.
pub fn link_matrices(pair: &ChannelPair, bce_on: bool) -> Result<(ComplexMatrix, ComplexMatrix)> {
    let flags = PipelineFlags {
        bce_on,
        ..PipelineFlags::default()
    };
    let mut trace = Trace::new();
    Ok((
        link_eigenvectors(&pair.dl, flags, &mut trace)?,
        link_eigenvectors(&pair.ul, flags, &mut trace)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_pair, EnvironmentSpec};
    use crate::codec::LayerSpec;
    use crate::ifa::make_benchmarks;
    use crate::metrics::sgcs;
    use crate::types::desk_config;

    fn setup(ul_assist: bool) -> (BenchmarkPair, ModelParams) {
        let cfg = desk_config();
        (
            make_benchmarks(&cfg).unwrap(),
            ModelParams::init(&LayerSpec::for_config(&cfg, ul_assist), 3).unwrap(),
        )
    }

    #[test]
    fn los_pair_has_zero_control_and_exact_bit_count() {
        let cfg = desk_config();
        let (bench, params) = setup(true);
        let pair = generate_pair(&EnvironmentSpec::line_of_sight(0, 1), &cfg, 0).unwrap();
        let (c, ctl) = ue_encode_pipeline(&pair, &bench, &params, 6).unwrap();
        assert_eq!(ctl, ShiftControl::ZERO);
        assert_eq!(c.total_bits(), cfg.m_bottleneck * 6);
        assert_eq!(ue_encode_pipeline(&pair, &bench, &params, 6).unwrap().0, c);
        let w = bs_decode_pipeline(&c, pair.uplink(), &bench, &params).unwrap();
        assert_eq!(w.shape(), (cfg.n_sub, cfg.n_tx));
    }

    #[test]
    fn stage_traces_follow_flags() {
        let cfg = desk_config();
        let pair = generate_pair(&EnvironmentSpec::family(0, 5), &cfg, 1).unwrap();
        for bce_on in [false, true] {
            for ifa_on in [false, true] {
                for ul_assist_on in [false, true] {
                    let flags = PipelineFlags {
                        bce_on,
                        ifa_on,
                        ul_assist_on,
                    };
                    let (bench, params) = setup(ul_assist_on);
                    let (c, _, ue) = ue_encode_traced(&pair, &bench, &params, 6, flags).unwrap();
                    let (_, bs) = bs_decode_traced(&c, pair.uplink(), &bench, &params, flags).unwrap();
                    let mut expect_ue = vec![Stage::Eigen];
                    expect_ue.extend(bce_on.then_some(Stage::Bce));
                    expect_ue.extend(ifa_on.then_some(Stage::Align));
                    let mut expect_bs = expect_ue.clone();
                    expect_ue.extend([Stage::Encode, Stage::Quantize]);
                    expect_bs.push(Stage::Dequantize);
                    expect_bs.extend(ul_assist_on.then_some(Stage::UlFusion));
                    expect_bs.push(Stage::Decode);
                    expect_bs.extend(ifa_on.then_some(Stage::Restore));
                    assert_eq!(ue, expect_ue, "{flags:?}");
                    assert_eq!(bs, expect_bs, "{flags:?}");
                }
            }
        }
    }

    #[test]
    fn mismatched_model_and_flags_rejected() {
        let cfg = desk_config();
        let (bench, params) = setup(false);
        let pair = generate_pair(&EnvironmentSpec::family(0, 5), &cfg, 1).unwrap();
        assert!(ue_encode_pipeline(&pair, &bench, &params, 6).is_err());
    }

    #[test]
    fn prepared_sample_restores_to_target_with_matching_controls() {
        let cfg = desk_config();
        let (bench, _) = setup(true);
        let env = EnvironmentSpec::family(1, 2);
        let mut checked = 0;
        for u in 0..40 {
            let pair = generate_pair(&env, &cfg, u).unwrap();
            let s = prepare_sample(&pair, &bench, PipelineFlags::default()).unwrap();
            let (b_dl, b_ul) = link_controls(&pair, &bench).unwrap();
            assert_eq!(s.frame, Frame::Aligned(b_ul));
            if b_dl == b_ul {
                // the ideal decoder output (the aligned input itself) restores exactly
                let back = s.frame.restore(&s.input);
                assert!(back.sub(&s.target).unwrap().fro_norm() < 1e-12);
                assert!(sgcs(&s.target, &back).unwrap() > 1.0 - 1e-12);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }
}
