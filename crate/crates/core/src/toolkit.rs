//! Synthetic corpus generation on disk.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::Settings;
use crate::error::{Error, Result};
use crate::io::{write_flo, write_image, write_joints, write_labels};
use crate::manifest::RunManifest;
use crate::synth::{render_scene, Fill, Motion, SynthScene, SynthSceneConfig};
use crate::tracker::JointMap;

fn pair(s: &str, key: &str) -> Result<[f64; 2]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => match (a.parse(), b.parse()) {
            (Ok(a), Ok(b)) => Ok([a, b]),
            _ => Err(Error::Config(format!("`{key}` must be two numbers `row,col`, got `{s}`"))),
        },
        _ => Err(Error::Config(format!("`{key}` must be two numbers `row,col`, got `{s}`"))),
    }
}

fn fill(s: &str, key: &str) -> Result<Fill> {
    match s {
        "flat" => Ok(Fill::Flat),
        "noise" => Ok(Fill::Noise),
        _ => Err(Error::Config(format!("`{key}` must be flat or noise, got `{s}`"))),
    }
}

/// Scene configuration from settings (`height`, `width`, `frames`, `shapes`,
/// `kinds`, `motion`, `velocity`, `amplitude`, `period`, `degrees_per_frame`,
/// `fill`, `background`, `background_moves`, `seed`).
pub fn scene_config_from_settings(s: &mut Settings) -> Result<SynthSceneConfig> {
    let height: usize = s.get("height", 64)?;
    let width: usize = s.get("width", 64)?;
    let frames: usize = s.get("frames", 5)?;
    let shapes: usize = s.get("shapes", 1)?;
    let kinds: String = s.get("kinds", "rectangle".to_string())?;
    let motion_name: String = s.get("motion", "translation".to_string())?;
    let motion = match motion_name.as_str() {
        "translation" => Motion::Translation {
            velocity: pair(&s.get("velocity", "0,2".to_string())?, "velocity")?,
        },
        "sinusoidal" => Motion::Sinusoidal {
            amplitude: pair(&s.get("amplitude", "0,3".to_string())?, "amplitude")?,
            period: s.get("period", 8.0)?,
        },
        "rotation" => Motion::Rotation {
            degrees_per_frame: s.get("degrees_per_frame", 3.0)?,
        },
        other => {
            return Err(Error::Config(format!(
                "`motion` must be translation, sinusoidal or rotation, got `{other}`"
            )))
        }
    };
    let fg = fill(&s.get("fill", "noise".to_string())?, "fill")?;
    let bg = fill(&s.get("background", "noise".to_string())?, "background")?;
    let background_moves: bool = s.get("background_moves", false)?;
    let seed: u64 = s.get("seed", 0)?;
    let kinds: Vec<&str> = kinds.split(',').map(str::trim).filter(|k| !k.is_empty()).collect();
    let mut cfg = SynthSceneConfig::random(height, width, frames, shapes, &kinds, motion, fg, bg, seed)?;
    cfg.background_moves = background_moves;
    cfg.validate()?;
    Ok(cfg)
}

/// Writes `frames_NNNN.png`, `flow_NNNN.flo` (pulling frame `N + 1` from frame
/// `N`), `mask_NNNN.png` when the scene has objects and `joints.csv` when it
/// has sticks. Returns the written paths.
pub fn write_scene(scene: &SynthScene, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    for (t, f) in scene.frames.iter().enumerate() {
        let p = out_dir.join(format!("frames_{t:04}.png"));
        write_image(f, &p)?;
        files.push(p);
    }
    for (t, f) in scene.flows.iter().enumerate() {
        let p = out_dir.join(format!("flow_{t:04}.flo"));
        write_flo(f, &p)?;
        files.push(p);
    }
    if scene.num_objects > 0 {
        for (t, l) in scene.labels.iter().enumerate() {
            let p = out_dir.join(format!("mask_{t:04}.png"));
            write_labels(l, scene.num_objects, &p)?;
            files.push(p);
        }
    }
    if scene.joints.first().is_some_and(|j| !j.is_empty()) {
        let (h, w) = (scene.frames[0].height(), scene.frames[0].width());
        let tracks: Vec<JointMap> = scene.joints.iter().map(|j| JointMap::new(h, w, j.clone())).collect();
        let p = out_dir.join("joints.csv");
        write_joints(&tracks, &p)?;
        files.push(p);
    }
    Ok(files)
}

/// Renders the scene described by `settings` into `out_dir` and writes
/// `manifest.txt` next to it.
pub fn synth_corpus(settings: &mut Settings, out_dir: &Path) -> Result<RunManifest> {
    let start = Instant::now();
    let cfg = scene_config_from_settings(settings)?;
    let scene = render_scene(&cfg)?;
    let files = write_scene(&scene, out_dir)?;
    let mut manifest = RunManifest::new("synth", settings, cfg.seed);
    manifest.record_artifacts(out_dir, &files)?;
    manifest.duration = start.elapsed();
    manifest.write(out_dir.join("manifest.txt"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter_flow::warp_with_flow;
    use crate::io::{read_flo, read_image};

    #[test]
    fn translation_scene_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Settings::from_text("frames = 5\nvelocity = 0,2\nheight = 32\nwidth = 40\nbackground_moves = true\n").unwrap();
        let m = synth_corpus(&mut s, dir.path()).unwrap();
        assert_eq!(m.artifacts.len(), 5 + 4 + 5);
        let f = read_flo(dir.path().join("flow_0002.flo")).unwrap();
        for d in f.data() {
            assert_eq!(*d, [0.0, -2.0]);
        }
        // Warping frame t by the stored flow reproduces frame t+1 away from
        // the columns that enter the view.
        let a = read_image(dir.path().join("frames_0001.png")).unwrap();
        let b = read_image(dir.path().join("frames_0002.png")).unwrap();
        let w = warp_with_flow(&a, &f).unwrap();
        for r in 0..32 {
            for c in 2..40 {
                assert!((w.get(r, c, 0) - b.get(r, c, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let text = "frames = 3\nshapes = 2\nkinds = rectangle,disk\nseed = 11\nheight = 24\nwidth = 24\nvelocity = 1,0\n";
        let m1 = synth_corpus(&mut Settings::from_text(text).unwrap(), d1.path()).unwrap();
        let m2 = synth_corpus(&mut Settings::from_text(text).unwrap(), d2.path()).unwrap();
        assert!(m1.artifact_mismatches(&m2).is_empty());
        assert_eq!(m1.config, m2.config);
    }

    #[test]
    fn rotation_center_is_fixed_and_sticks_give_joints() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Settings::from_text(
            "motion = rotation\nkinds = stick\nframes = 3\nheight = 33\nwidth = 33\ndegrees_per_frame = 4\n",
        )
        .unwrap();
        synth_corpus(&mut s, dir.path()).unwrap();
        let f = read_flo(dir.path().join("flow_0000.flo")).unwrap();
        assert!(f.get(16, 16)[0].abs() < 1e-6 && f.get(16, 16)[1].abs() < 1e-6);
        let joints = crate::io::read_joints(dir.path().join("joints.csv"), 33, 33).unwrap();
        assert_eq!(joints.len(), 3);
        assert_eq!(joints[0].points.len(), 2);
    }

    #[test]
    fn bad_settings_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        for text in [
            "motion = spin",
            "velocity = 1",
            "fill = plaid",
            "kinds = hexagon",
            "velocity = 0,40\nframes = 10",
        ] {
            let mut s = Settings::from_text(text).unwrap();
            assert!(matches!(synth_corpus(&mut s, dir.path()), Err(Error::Config(_))), "{text}");
        }
    }
}
