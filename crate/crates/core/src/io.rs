//! Frame and episode files. Frames are binary 8-bit pixmaps named `000.ppm`, `001.ppm`, ….

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::Frame;
use crate::error::{bail, Error, Result};
use crate::toyworld::{ConditionEmbedding, Episode, SceneState};
use crate::trajwarp::CameraPose;

pub fn encode_ppm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend(frame.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        bail!(Format, "pixmap header ends early");
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    std::str::from_utf8(tok).ok().and_then(|s| s.parse().ok()).ok_or_else(|| Error::Format(format!("pixmap {what} is not a number")))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Frame> {
    let mut pos = 0;
    if header_token(bytes, &mut pos)? != b"P6" {
        bail!(Format, "not a binary pixmap");
    }
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        bail!(Format, "pixmap maxval {maxval} unsupported");
    }
    pos += 1;
    let n = width * height * 3;
    let raw = bytes.get(pos..pos + n).ok_or_else(|| Error::Format("pixmap data truncated".into()))?;
    Ok(Frame { height, width, data: raw.iter().map(|&b| f64::from(b) / 255.0).collect() })
}

pub fn frame_name(i: usize) -> String {
    format!("{i:03}.ppm")
}

pub fn write_video(dir: &Path, frames: &[Frame]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        let mut file = std::io::BufWriter::new(std::fs::File::create(dir.join(frame_name(i)))?);
        file.write_all(&encode_ppm(f))?;
        file.flush()?;
    }
    Ok(())
}

/// Reads every `.ppm` in `dir` in name order. Other regular files are an error
/// except `.json` and `.csv` sidecars.
pub fn read_video(dir: &Path) -> Result<Vec<Frame>> {
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        match path.extension().and_then(|e| e.to_str()) {
            Some("ppm") => paths.push(path),
            Some("json") | Some("csv") => {}
            _ => bail!(Format, "{} is not a frame file", path.display()),
        }
    }
    if paths.is_empty() {
        bail!(Format, "{} contains no frames", dir.display());
    }
    paths.sort();
    paths
        .iter()
        .map(|p| decode_ppm(&std::fs::read(p)?).map_err(|e| Error::Format(format!("{}: {e}", p.display()))))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct EpisodeMeta {
    version: u32,
    poses: Vec<CameraPose>,
    descriptor: ConditionEmbedding,
    frame_period: f64,
    scene: SceneState,
}

pub const EPISODE_META: &str = "episode.json";

pub fn save_episode(dir: &Path, episode: &Episode) -> Result<()> {
    write_video(dir, &episode.frames)?;
    let meta = EpisodeMeta {
        version: 1,
        poses: episode.poses.clone(),
        descriptor: episode.descriptor.clone(),
        frame_period: episode.frame_period,
        scene: episode.scene.clone(),
    };
    std::fs::write(dir.join(EPISODE_META), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

/// Frames come back quantized to 8 bits.
pub fn load_episode(dir: &Path) -> Result<Episode> {
    let frames = read_video(dir)?;
    let meta: EpisodeMeta = serde_json::from_slice(&std::fs::read(dir.join(EPISODE_META))?)?;
    if meta.poses.len() != frames.len() {
        bail!(Format, "{}: {} poses for {} frames", dir.display(), meta.poses.len(), frames.len());
    }
    Ok(Episode { frames, poses: meta.poses, descriptor: meta.descriptor, frame_period: meta.frame_period, scene: meta.scene })
}

/// Episode directories directly under `root`, in name order.
pub fn load_dataset(root: &Path) -> Result<Vec<Episode>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.join(EPISODE_META).is_file())
        .collect();
    if dirs.is_empty() {
        bail!(InvalidArgument, "{} holds no episodes", root.display());
    }
    dirs.sort();
    dirs.iter().map(|d| load_episode(d)).collect()
}
