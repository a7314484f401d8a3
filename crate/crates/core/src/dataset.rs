//! On-disk datasets: a `manifest.txt` plus one directory per episode holding
//! `states.csv`, `actions.csv` and, for rendered systems, `frame_%04d.pgm`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{format_action_csv, generate_trajectory, parse_action_csv, parse_state_csv, Policy, SystemKind, SystemSpec, Trajectory};
use crate::error::{Error, Result};
use crate::evalreport::frame_file_name;
use crate::pgm;
use crate::render::{enhance, render_frame, Episode, Frame, RenderConfig};

pub const FORMAT: &str = "cknet-dataset-1";
pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeEntry {
    pub id: usize,
    /// Number of recorded states (actions + 1).
    pub length: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub format: String,
    pub system: SystemKind,
    pub dt: f64,
    pub policy: String,
    /// `None` for state-only datasets.
    pub frames: Option<FrameInfo>,
    pub episodes: Vec<EpisodeEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameInfo {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub enhance_threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub trajectories: Vec<Trajectory>,
    /// Enhanced frames per episode, parallel to `trajectories`.
    pub frames: Option<Vec<Vec<Frame>>>,
}

pub fn episode_dir(root: &Path, id: usize) -> PathBuf {
    root.join(format!("episode_{id:04}"))
}

fn format_states_csv(states: &[Vec<f64>]) -> String {
    let dim = states.first().map_or(0, Vec::len);
    let mut out = (0..dim).map(|i| format!("s{i}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for s in states {
        let row: Vec<String> = s.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "format = {}", self.format);
        let _ = writeln!(out, "system = {}", self.system.name());
        let _ = writeln!(out, "dt = {:?}", self.dt);
        let _ = writeln!(out, "policy = {}", self.policy);
        match &self.frames {
            Some(f) => {
                let _ = writeln!(out, "frames = true");
                let _ = writeln!(out, "channels = {}", f.channels);
                let _ = writeln!(out, "height = {}", f.height);
                let _ = writeln!(out, "width = {}", f.width);
                let _ = writeln!(out, "enhance_threshold = {:?}", f.enhance_threshold);
            }
            None => {
                let _ = writeln!(out, "frames = false");
            }
        }
        let _ = writeln!(out, "episodes = {}", self.episodes.len());
        for e in &self.episodes {
            let _ = writeln!(out, "episode = {} {} {}", e.id, e.length, e.seed);
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |d: String| Error::format(path, d);
        let mut fields = std::collections::BTreeMap::new();
        let mut episodes = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "episode" {
                let p: Vec<&str> = v.split_whitespace().collect();
                let parsed = (p.len() == 3)
                    .then(|| Some((p[0].parse().ok()?, p[1].parse().ok()?, p[2].parse().ok()?)))
                    .flatten();
                let (id, length, seed) = parsed.ok_or_else(|| bad(format!("line {}: malformed episode entry", n + 1)))?;
                episodes.push(EpisodeEntry { id, length, seed });
            } else {
                fields.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| fields.get(k).map(String::as_str).ok_or_else(|| bad(format!("missing key `{k}`")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(format!("key `{k}` is not a number"))) };
        let count = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(format!("key `{k}` is not a count"))) };
        let format = get("format")?.to_string();
        if format != FORMAT {
            return Err(bad(format!("unrecognized format `{format}`")));
        }
        let system = SystemKind::from_name(get("system")?).map_err(|e| bad(e.to_string()))?;
        let frames = match get("frames")? {
            "true" => Some(FrameInfo {
                channels: count("channels")?,
                height: count("height")?,
                width: count("width")?,
                enhance_threshold: num("enhance_threshold")?,
            }),
            "false" => None,
            other => return Err(bad(format!("key `frames`: expected true or false, got `{other}`"))),
        };
        let manifest = Self {
            format,
            system,
            dt: num("dt")?,
            policy: get("policy")?.to_string(),
            frames,
            episodes,
        };
        if count("episodes")? != manifest.episodes.len() {
            return Err(bad("episode count disagrees with the episode list".into()));
        }
        manifest.validate().map_err(|e| bad(e.to_string()))?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes.is_empty() {
            return Err(Error::EmptyDataset("manifest lists no episodes".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        for (k, e) in self.episodes.iter().enumerate() {
            if e.id != k {
                return Err(Error::Config(format!("episode ids must be 0..n in order, found {} at {k}", e.id)));
            }
            if e.length < 2 {
                return Err(Error::TooShort(format!("episode {k} has {} states", e.length)));
            }
        }
        Ok(())
    }

    /// Checks that every listed episode file exists.
    pub fn check_files(&self, root: &Path) -> Result<()> {
        for e in &self.episodes {
            let dir = episode_dir(root, e.id);
            let mut needed = vec![dir.join("states.csv"), dir.join("actions.csv")];
            if self.frames.is_some() {
                needed.push(dir.join(frame_file_name(0)));
                needed.push(dir.join(frame_file_name(e.length - 1)));
            }
            if let Some(missing) = needed.iter().find(|p| !p.exists()) {
                return Err(Error::format(missing, "listed in the manifest but missing"));
            }
        }
        Ok(())
    }
}

/// Simulates `episodes` trajectories of `steps` actions and renders them
/// when a render config is given. Episode seeds derive from `seed`.
pub fn generate(
    spec: &SystemSpec,
    policy: &Policy,
    episodes: usize,
    steps: usize,
    seed: u64,
    render: Option<&RenderConfig>,
) -> Result<Dataset> {
    if episodes == 0 || steps == 0 {
        return Err(Error::Config("episodes and steps must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..episodes).map(|_| rng.random()).collect();
    let trajectories = seeds
        .iter()
        .map(|&s| generate_trajectory(spec, policy, steps, s))
        .collect::<Result<Vec<_>>>()?;
    let frames = match render {
        Some(cfg) => {
            cfg.validate()?;
            Some(
                trajectories
                    .iter()
                    .map(|t| {
                        t.states
                            .iter()
                            .map(|s| render_frame(s, spec, cfg).map(|f| enhance(&f, cfg.enhance_threshold)))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        None => None,
    };
    let manifest = DatasetManifest {
        format: FORMAT.into(),
        system: spec.kind,
        dt: spec.dt,
        policy: policy.name().into(),
        frames: render.map(|c| FrameInfo {
            channels: c.channels,
            height: c.height,
            width: c.width,
            enhance_threshold: c.enhance_threshold,
        }),
        episodes: trajectories
            .iter()
            .zip(&seeds)
            .enumerate()
            .map(|(id, (t, &seed))| EpisodeEntry {
                id,
                length: t.states.len(),
                seed,
            })
            .collect(),
    };
    Ok(Dataset {
        manifest,
        trajectories,
        frames,
    })
}

impl Dataset {
    pub fn write(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        for (k, traj) in self.trajectories.iter().enumerate() {
            let dir = episode_dir(root, k);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let states = dir.join("states.csv");
            fs::write(&states, format_states_csv(&traj.states)).map_err(|e| Error::io(&states, e))?;
            let actions = dir.join("actions.csv");
            let n = traj.actions.first().map_or(0, Vec::len);
            fs::write(&actions, format_action_csv(&traj.actions, n)).map_err(|e| Error::io(&actions, e))?;
            if let Some(frames) = &self.frames {
                for (j, f) in frames[k].iter().enumerate() {
                    pgm::write(&dir.join(frame_file_name(j)), f)?;
                }
            }
        }
        let path = root.join(MANIFEST);
        fs::write(&path, self.manifest.to_text()).map_err(|e| Error::io(&path, e))
    }

    pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = DatasetManifest::parse(&text, &path)?;
        manifest.check_files(root)?;
        Ok(manifest)
    }

    /// Reads a dataset; the manifest and file listing validate first.
    pub fn read(root: &Path) -> Result<Self> {
        let manifest = Self::read_manifest(root)?;
        let mut trajectories = Vec::with_capacity(manifest.episodes.len());
        let mut frames = manifest.frames.map(|_| Vec::with_capacity(manifest.episodes.len()));
        for e in &manifest.episodes {
            let dir = episode_dir(root, e.id);
            let states_path = dir.join("states.csv");
            let text = fs::read_to_string(&states_path).map_err(|err| Error::io(&states_path, err))?;
            let states = parse_state_csv(&text).map_err(|d| Error::format(&states_path, d))?;
            let actions_path = dir.join("actions.csv");
            let text = fs::read_to_string(&actions_path).map_err(|err| Error::io(&actions_path, err))?;
            let actions = parse_action_csv(&text).map_err(|d| Error::format(&actions_path, d))?;
            if states.len() != e.length || actions.len() + 1 != e.length {
                return Err(Error::format(
                    &dir,
                    format!(
                        "manifest length {} but {} states and {} actions on disk",
                        e.length,
                        states.len(),
                        actions.len()
                    ),
                ));
            }
            if let (Some(all), Some(info)) = (frames.as_mut(), manifest.frames) {
                let ep = (0..e.length)
                    .map(|j| pgm::read(&dir.join(frame_file_name(j))))
                    .collect::<Result<Vec<_>>>()?;
                if ep.iter().any(|f| (f.height, f.width) != (info.height, info.width)) {
                    return Err(Error::format(&dir, "frame size disagrees with the manifest"));
                }
                all.push(ep);
            }
            trajectories.push(Trajectory {
                states,
                actions,
                dt: manifest.dt,
                seed: e.seed,
            });
        }
        Ok(Self {
            manifest,
            trajectories,
            frames,
        })
    }

    /// Stacked-observation episodes for training and evaluation.
    pub fn episodes(&self) -> Result<Vec<Episode>> {
        let (Some(frames), Some(info)) = (&self.frames, self.manifest.frames) else {
            return Err(Error::Config("dataset holds states only; pixel episodes need rendered frames".into()));
        };
        frames
            .iter()
            .zip(&self.trajectories)
            .map(|(f, t)| Episode::from_frames(f.clone(), &t.actions, info.channels, Some(t.states.clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_render() -> RenderConfig {
        RenderConfig {
            height: 8,
            width: 8,
            channels: 2,
            ..RenderConfig::default()
        }
    }

    #[test]
    fn pixel_dataset_round_trip() {
        let spec = SystemSpec::mountain_car();
        let data = generate(&spec, &Policy::Sinusoid, 3, 6, 42, Some(&small_render())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        data.write(dir.path()).unwrap();
        assert!(episode_dir(dir.path(), 2).join("frame_0006.pgm").exists());
        let back = Dataset::read(dir.path()).unwrap();
        assert_eq!(back, data);
        let eps = back.episodes().unwrap();
        assert_eq!(eps.len(), 3);
        assert_eq!(eps[0].num_observations(), 6);
    }

    #[test]
    fn vector_dataset_round_trip() {
        let spec = SystemSpec::linear_ref_default();
        let data = generate(&spec, &Policy::RandomUniform, 2, 10, 1, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        data.write(dir.path()).unwrap();
        let back = Dataset::read(dir.path()).unwrap();
        assert_eq!(back, data);
        assert!(back.episodes().is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SystemSpec::cart_pole();
        let a = generate(&spec, &Policy::RandomUniform, 2, 5, 9, Some(&small_render())).unwrap();
        let b = generate(&spec, &Policy::RandomUniform, 2, 5, 9, Some(&small_render())).unwrap();
        assert_eq!(a, b);
        let c = generate(&spec, &Policy::RandomUniform, 2, 5, 10, Some(&small_render())).unwrap();
        assert_ne!(a, c);
        assert!(generate(&spec, &Policy::RandomUniform, 0, 5, 9, None).is_err());
    }

    #[test]
    fn manifest_problems_are_caught() {
        let spec = SystemSpec::mountain_car();
        let data = generate(&spec, &Policy::Sinusoid, 2, 4, 0, Some(&small_render())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        data.write(dir.path()).unwrap();
        let manifest_path = dir.path().join(MANIFEST);
        let good = fs::read_to_string(&manifest_path).unwrap();

        fs::write(&manifest_path, good.replace(FORMAT, "cknet-dataset-9")).unwrap();
        assert!(Dataset::read(dir.path()).is_err());
        fs::write(&manifest_path, good.replace("episodes = 2", "episodes = 3")).unwrap();
        assert!(Dataset::read(dir.path()).is_err());
        fs::write(&manifest_path, good.replace("episode = 1 5", "episode = 1 7")).unwrap();
        assert!(Dataset::read(dir.path()).is_err());

        fs::write(&manifest_path, &good).unwrap();
        fs::remove_file(episode_dir(dir.path(), 1).join("frame_0004.pgm")).unwrap();
        let err = Dataset::read(dir.path()).unwrap_err();
        assert!(err.to_string().contains("missing"), "{err}");
    }
}
