//! Evaluation of trained models: latent-evolution MAE, decoded rollouts,
//! eigenfunction traces and their text/PGM/SVG exports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::koopman::{eigenfunctions, KoopmanModel, C64};
use crate::pgm;
use crate::render::{Episode, Frame};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `mae[t - 1]` is the latent error after `t` rollout steps.
    pub mae: Vec<f64>,
    pub pixel_mse: Vec<f64>,
    pub episodes_used: usize,
    pub episodes_skipped: usize,
    pub model_id: String,
    pub spectrum_path: Option<PathBuf>,
}

fn actions_of(episode: &Episode, steps: usize) -> Vec<DVector<f64>> {
    episode.actions[..steps].iter().map(|u| DVector::from_column_slice(u)).collect()
}

fn encoded(model: &KoopmanModel, episode: &Episode, j: usize) -> Result<DVector<f64>> {
    model.encode(&episode.observation(j)?.pixels, None)
}

/// `|phi_K(x_t) - phi(x_t)|` per coordinate for `t = 1..=horizon`, with
/// `phi_K` the latent rollout from `phi(x_0)` under the recorded actions.
pub fn latent_errors(model: &KoopmanModel, episode: &Episode, horizon: usize) -> Result<Vec<DVector<f64>>> {
    if episode.num_observations() < horizon + 1 {
        return Err(Error::TooShort(format!(
            "episode has {} observations, horizon {horizon} needs {}",
            episode.num_observations(),
            horizon + 1
        )));
    }
    let z0 = encoded(model, episode, 0)?;
    let rollout = model.rollout(&z0, &actions_of(episode, horizon))?;
    rollout
        .iter()
        .enumerate()
        .map(|(k, z)| Ok((z - encoded(model, episode, k + 1)?).abs()))
        .collect()
}

/// Averages per-episode absolute errors over episodes and coordinates.
pub fn mae_from_errors(errors: &[Vec<DVector<f64>>]) -> Result<Vec<f64>> {
    let first = errors
        .first()
        .ok_or_else(|| Error::EmptyDataset("no episode long enough for the horizon".into()))?;
    let horizon = first.len();
    let mut curve = vec![0.0; horizon];
    for ep in errors {
        if ep.len() != horizon {
            return Err(Error::Shape("error sequences differ in length".into()));
        }
        for (c, e) in curve.iter_mut().zip(ep) {
            *c += e.abs().mean();
        }
    }
    let m = errors.len() as f64;
    Ok(curve.into_iter().map(|c| c / m).collect())
}

/// Split of `episodes` into those usable at `horizon` and a skip count.
fn usable(episodes: &[Episode], horizon: usize) -> (Vec<&Episode>, usize) {
    let kept: Vec<&Episode> = episodes.iter().filter(|e| e.num_observations() > horizon).collect();
    let skipped = episodes.len() - kept.len();
    (kept, skipped)
}

/// Mean absolute latent error per rollout step; episodes shorter than the
/// horizon are skipped and counted.
pub fn latent_mae(model: &KoopmanModel, episodes: &[Episode], horizon: usize) -> Result<(Vec<f64>, usize)> {
    let (kept, skipped) = usable(episodes, horizon);
    let errors = kept
        .par_iter()
        .map(|ep| latent_errors(model, ep, horizon))
        .collect::<Result<Vec<_>>>()?;
    Ok((mae_from_errors(&errors)?, skipped))
}

fn pixel_errors(model: &KoopmanModel, episode: &Episode, horizon: usize) -> Result<Vec<f64>> {
    let dec_len = model.decoder.output_shape().numel();
    let z0 = encoded(model, episode, 0)?;
    let rollout = model.rollout(&z0, &actions_of(episode, horizon))?;
    rollout
        .iter()
        .enumerate()
        .map(|(k, z)| {
            let truth = episode.observation(k + 1)?.pixels;
            let pred = model.decode(z)?;
            let tail = &truth[truth.len() - dec_len..];
            Ok(pred.iter().zip(tail).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / dec_len as f64)
        })
        .collect()
}

/// Latent MAE and per-pixel mean-square prediction error curves.
pub fn evaluate(model: &KoopmanModel, episodes: &[Episode], horizon: usize, model_id: &str) -> Result<EvalReport> {
    let (kept, skipped) = usable(episodes, horizon);
    let per_episode = kept
        .par_iter()
        .map(|ep| Ok((latent_errors(model, ep, horizon)?, pixel_errors(model, ep, horizon)?)))
        .collect::<Result<Vec<_>>>()?;
    let (latent, pixel): (Vec<_>, Vec<_>) = per_episode.into_iter().unzip();
    let mae = mae_from_errors(&latent)?;
    let mut pixel_mse = vec![0.0; horizon];
    for ep in &pixel {
        for (acc, e) in pixel_mse.iter_mut().zip(ep) {
            *acc += e;
        }
    }
    pixel_mse.iter_mut().for_each(|v| *v /= pixel.len() as f64);
    Ok(EvalReport {
        mae,
        pixel_mse,
        episodes_used: kept.len(),
        episodes_skipped: skipped,
        model_id: model_id.to_string(),
        spectrum_path: None,
    })
}

/// Decoded open-loop prediction: `decode(encode(x_0))` followed by the
/// decoded rollout under the first `horizon` actions. Each frame is the most
/// recent decoded channel, quantized to the PGM grid.
pub fn rollout_images(model: &KoopmanModel, episode: &Episode, horizon: usize) -> Result<Vec<Frame>> {
    if episode.actions.len() < horizon || episode.num_observations() == 0 {
        return Err(Error::TooShort(format!(
            "episode has {} actions, horizon is {horizon}",
            episode.actions.len()
        )));
    }
    let (height, width) = episode.frame_shape();
    let plane = height * width;
    let z0 = encoded(model, episode, 0)?;
    let mut latents = vec![z0.clone()];
    latents.extend(model.rollout(&z0, &actions_of(episode, horizon))?);
    latents
        .iter()
        .map(|z| {
            let out = model.decode(z)?;
            if out.len() % plane != 0 || out.is_empty() {
                return Err(Error::Shape(format!("decoder emits {} values for {height}x{width} frames", out.len())));
            }
            let last = &out[out.len() - plane..];
            Ok(Frame {
                height,
                width,
                data: last.iter().map(|&v| pgm::from_byte(pgm::to_byte(v))).collect(),
            })
        })
        .collect()
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:04}.pgm")
}

pub fn write_frame_series(dir: &Path, frames: &[Frame]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (k, f) in frames.iter().enumerate() {
        pgm::write(&dir.join(frame_file_name(k)), f)?;
    }
    Ok(())
}

/// Reads `frame_0000.pgm, frame_0001.pgm, ...` until the first gap.
pub fn read_frame_series(dir: &Path) -> Result<Vec<Frame>> {
    let mut frames = Vec::new();
    loop {
        let path = dir.join(frame_file_name(frames.len()));
        if !path.exists() {
            return Ok(frames);
        }
        frames.push(pgm::read(&path)?);
    }
}

/// Eigenfunction values along the encoded episode, `[mode][step]`.
pub fn eigen_traces(model: &KoopmanModel, episode: &Episode) -> Result<Vec<Vec<C64>>> {
    let report = crate::koopman::spectrum(&model.a, model.dt)?;
    let latents = (0..episode.num_observations())
        .map(|j| encoded(model, episode, j))
        .collect::<Result<Vec<_>>>()?;
    eigenfunctions(&report, &latents)
}

pub const TRACE_HEADER: &str = "step,mode,re,im";

pub fn eigen_traces_csv(traces: &[Vec<C64>]) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    let steps = traces.first().map_or(0, Vec::len);
    for step in 0..steps {
        for (mode, trace) in traces.iter().enumerate() {
            let _ = writeln!(out, "{step},{mode},{:?},{:?}", trace[step].re, trace[step].im);
        }
    }
    out
}

pub fn parse_eigen_traces_csv(text: &str) -> Result<Vec<Vec<C64>>> {
    let bad = |d: String| Error::format("<eigen traces>", d);
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(TRACE_HEADER) {
        return Err(bad("missing header".into()));
    }
    let mut traces: Vec<Vec<C64>> = Vec::new();
    for (k, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(bad(format!("row {}: expected 4 fields", k + 1)));
        }
        let idx = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("row {}: bad index `{s}`", k + 1)));
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("row {}: bad number `{s}`", k + 1)));
        let (step, mode) = (idx(f[0])?, idx(f[1])?);
        if mode == traces.len() && step == 0 {
            traces.push(Vec::new());
        }
        let trace = traces
            .get_mut(mode)
            .ok_or_else(|| bad(format!("row {}: mode {mode} out of order", k + 1)))?;
        if trace.len() != step {
            return Err(bad(format!("row {}: step {step} out of order", k + 1)));
        }
        trace.push(C64::new(num(f[2])?, num(f[3])?));
    }
    Ok(traces)
}

pub const CURVE_HEADER: &str = "step,latent_mae,pixel_mse";

pub fn curves_csv(report: &EvalReport) -> String {
    let mut out = format!("{CURVE_HEADER}\n");
    for (k, (m, p)) in report.mae.iter().zip(&report.pixel_mse).enumerate() {
        let _ = writeln!(out, "{},{m:?},{p:?}", k + 1);
    }
    out
}

/// `(latent_mae, pixel_mse)` columns of a curves file.
pub fn parse_curves_csv(text: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let bad = |d: String| Error::format("<curves>", d);
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CURVE_HEADER) {
        return Err(bad("missing header".into()));
    }
    let (mut mae, mut mse) = (Vec::new(), Vec::new());
    for (k, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 || f[0] != (k + 1).to_string() {
            return Err(bad(format!("row {}: malformed", k + 1)));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("row {}: bad number `{s}`", k + 1)));
        mae.push(num(f[1])?);
        mse.push(num(f[2])?);
    }
    Ok((mae, mse))
}

const PALETTE: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Line plot of named curves against step `1..`, as standalone SVG text.
pub fn svg_line_plot(title: &str, series: &[(&str, &[f64])]) -> String {
    let (w, h, margin) = (640.0, 400.0, 50.0);
    let len = series.iter().map(|(_, s)| s.len()).max().unwrap_or(0).max(2);
    let top = series
        .iter()
        .flat_map(|(_, s)| s.iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    let top = if top > 0.0 { top } else { 1.0 };
    let sx = |k: usize| margin + (w - 2.0 * margin) * k as f64 / (len - 1) as f64;
    let sy = |v: f64| h - margin - (h - 2.0 * margin) * (v / top).clamp(0.0, 1.0);
    let escape = |s: &str| s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");

    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="25" text-anchor="middle" font-size="16">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        out,
        r#"<path d="M{margin},{margin} V{} H{}" fill="none" stroke="black"/>"#,
        h - margin,
        w - margin
    );
    let _ = writeln!(out, r#"<text x="{margin}" y="{}" font-size="11">0</text>"#, h - margin + 15.0);
    let _ = writeln!(out, r#"<text x="5" y="{}" font-size="11">{top:.3e}</text>"#, margin);
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{len}</text>"#, w - margin, h - margin + 15.0);
    for (k, (name, values)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.2},{:.2}", sx(i), sy(v)))
            .collect();
        let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, points.join(" "));
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{}</text>"#,
            w - margin - 120.0,
            margin + 15.0 * (k + 1) as f64,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{generate_trajectory, Policy, SystemSpec};
    use crate::netcore::{ArchConfig, EncoderMode, LayerSpec, Network, Shape};
    use crate::render::{identity_episode, render_episode, RenderConfig};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn pixel_model() -> (KoopmanModel, Vec<Episode>) {
        let spec = SystemSpec::mountain_car();
        let rcfg = RenderConfig {
            height: 8,
            width: 8,
            channels: 2,
            ..RenderConfig::default()
        };
        let eps = (0..3)
            .map(|s| render_episode(&generate_trajectory(&spec, &Policy::Sinusoid, 14, s).unwrap(), &spec, &rcfg).unwrap())
            .collect();
        let arch = ArchConfig {
            conv_channels: [2, 2],
            hidden: 6,
            ..ArchConfig::new(2, 8, 8, 3, EncoderMode::Deterministic)
        };
        (KoopmanModel::initialize(&arch, 1, 1.0, 4).unwrap(), eps)
    }

    /// Linear system observed directly, encoder = identity.
    fn identity_model(a: DMatrix<f64>, b: DMatrix<f64>) -> KoopmanModel {
        let m = a.nrows();
        let mut w = vec![0.0; m * m + m];
        for i in 0..m {
            w[i * m + i] = 1.0;
        }
        let enc = Network::with_params(Shape::Vector(m), vec![LayerSpec::dense(m, m)], w.clone()).unwrap();
        let dec = Network::with_params(Shape::Vector(m), vec![LayerSpec::dense(m, m)], w).unwrap();
        KoopmanModel::new(a, b, enc, dec, EncoderMode::Deterministic, 0.1).unwrap()
    }

    #[test]
    fn hand_mae_example() {
        let errors = vec![vec![DVector::from_element(1, 0.1), DVector::from_element(1, -0.3)]];
        let curve = mae_from_errors(&errors).unwrap();
        assert!((curve[0] - 0.1).abs() < 1e-15 && (curve[1] - 0.3).abs() < 1e-15);
        assert!(mae_from_errors(&[]).is_err());
    }

    #[test]
    fn exact_linear_model_has_zero_mae() {
        let a = crate::dynamics::damped_rotation(-0.3, 2.0, 0.1);
        let b = DMatrix::from_column_slice(2, 1, &[0.0, 0.1]);
        let spec = SystemSpec::linear_ref(a.clone(), b.clone(), 0.1).unwrap();
        let model = identity_model(a, b);
        let eps: Vec<Episode> = (0..3)
            .map(|s| identity_episode(&generate_trajectory(&spec, &Policy::RandomUniform, 30, s).unwrap(), 1).unwrap())
            .collect();
        let (curve, skipped) = latent_mae(&model, &eps, 20).unwrap();
        assert_eq!(skipped, 0);
        assert_eq!(curve.len(), 20);
        assert!(curve.iter().all(|&v| v < 1e-12));
        let (_, skipped) = latent_mae(&model, &eps[..1], 30).unwrap();
        assert_eq!(skipped, 0);
        assert!(matches!(latent_mae(&model, &eps, 31), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn mae_ignores_episode_order_and_skips_short() {
        let (model, mut eps) = pixel_model();
        let (a, _) = latent_mae(&model, &eps, 5).unwrap();
        eps.reverse();
        let (b, _) = latent_mae(&model, &eps, 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
        let spec = SystemSpec::mountain_car();
        let short = render_episode(
            &generate_trajectory(&spec, &Policy::Sinusoid, 4, 9).unwrap(),
            &spec,
            &RenderConfig {
                height: 8,
                width: 8,
                channels: 2,
                ..RenderConfig::default()
            },
        )
        .unwrap();
        eps.push(short);
        let report = evaluate(&model, &eps, 5, "tiny").unwrap();
        assert_eq!((report.episodes_used, report.episodes_skipped), (3, 1));
        assert_eq!(report.mae.len(), 5);
        assert!(report.pixel_mse.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn rollout_images_shapes() {
        let (model, eps) = pixel_model();
        let zero = rollout_images(&model, &eps[0], 0).unwrap();
        assert_eq!(zero.len(), 1);
        let z0 = model.encode(&eps[0].observation(0).unwrap().pixels, None).unwrap();
        let direct = model.decode(&z0).unwrap();
        for (p, d) in zero[0].data.iter().zip(&direct[64..]) {
            assert!((p - d).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let frames = rollout_images(&model, &eps[0], 6).unwrap();
        assert_eq!(frames.len(), 7);
        assert!(frames.iter().all(|f| f.data.iter().all(|&v| (0.0..=1.0).contains(&v))));
        assert!(rollout_images(&model, &eps[0], 100).is_err());

        let dir = tempfile::tempdir().unwrap();
        write_frame_series(dir.path(), &frames).unwrap();
        assert!(dir.path().join("frame_0006.pgm").exists());
        assert_eq!(read_frame_series(dir.path()).unwrap(), frames);
    }

    #[test]
    fn traces_count_constant_and_round_trip() {
        let (model, eps) = pixel_model();
        let traces = eigen_traces(&model, &eps[0]).unwrap();
        assert_eq!(traces.len(), 3);
        assert_eq!(traces[0].len(), eps[0].num_observations());
        assert_eq!(parse_eigen_traces_csv(&eigen_traces_csv(&traces)).unwrap(), traces);

        let mut still = eps[0].clone();
        let first = still.frames[0].clone();
        still.frames.iter_mut().for_each(|f| *f = first.clone());
        for trace in eigen_traces(&model, &still).unwrap() {
            assert!(trace.iter().all(|v| *v == trace[0]));
        }
    }

    #[test]
    fn defective_operator_propagates() {
        let (mut model, eps) = pixel_model();
        model.a = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.5]);
        assert!(matches!(eigen_traces(&model, &eps[0]), Err(Error::NotDiagonalizable { .. })));
    }

    #[test]
    fn curves_round_trip_and_svg() {
        let report = EvalReport {
            mae: vec![0.1, 0.25, 1.0 / 3.0],
            pixel_mse: vec![0.0, 0.5, 2.0],
            episodes_used: 1,
            episodes_skipped: 0,
            model_id: "m".into(),
            spectrum_path: None,
        };
        let (mae, mse) = parse_curves_csv(&curves_csv(&report)).unwrap();
        assert_eq!((mae, mse), (report.mae.clone(), report.pixel_mse.clone()));
        let svg = svg_line_plot("MAE <dck>", &[("dck", &report.mae), ("vck", &report.pixel_mse)]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("&lt;dck&gt;"));
    }

    proptest! {
        #[test]
        fn self_generated_episodes_have_zero_mae(seed in 0u64..1000, horizon in 1usize..15) {
            let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, -0.2, 0.8]);
            let b = DMatrix::from_column_slice(2, 1, &[0.3, -0.1]);
            let spec = SystemSpec::linear_ref(a.clone(), b.clone(), 0.1).unwrap();
            let model = identity_model(a, b);
            let traj = generate_trajectory(&spec, &Policy::RandomUniform, horizon, seed).unwrap();
            let (curve, _) = latent_mae(&model, &[identity_episode(&traj, 1).unwrap()], horizon).unwrap();
            prop_assert!(curve.iter().all(|&v| v < 1e-12));
        }

        #[test]
        fn trace_csv_round_trips(values in proptest::collection::vec((-1e3..1e3f64, -1e3..1e3f64), 1..30)) {
            let traces = vec![values.iter().map(|&(r, i)| C64::new(r, i)).collect::<Vec<_>>(); 2];
            prop_assert_eq!(parse_eigen_traces_csv(&eigen_traces_csv(&traces)).unwrap(), traces);
        }
    }
}
