//! TrajNet-style text ingestion: whitespace-separated
//! `frame_id agent_id x y` rows, the de-facto ETH/UCY interchange layout.
//!
//! Rows are grouped by agent, windows of `t_obs + t_fut` consecutive frames
//! are slid along each gap-free run, and co-present agents at the window's
//! anchor frame are attached as neighbors.

use std::collections::HashMap;
use std::path::Path;

use super::{NeighborState, Scene};
use crate::error::{Error, Result};
use crate::geom::{Point2, Trajectory};

#[derive(Debug, Clone, Copy)]
pub struct TrajnetWindowing {
    pub t_obs: usize,
    pub t_fut: usize,
}

impl Default for TrajnetWindowing {
    fn default() -> Self {
        TrajnetWindowing { t_obs: super::T_OBS, t_fut: super::T_FUT }
    }
}

#[derive(Debug)]
struct Row {
    frame: i64,
    agent: i64,
    pos: Point2,
}

fn parse_rows(text: &str) -> Result<Vec<Row>> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 4 fields (frame agent x y), got {}", fields.len()),
            });
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad {what} value '{s}'"),
            })
        };
        let frame_f = num(fields[0], "frame")?;
        let agent_f = num(fields[1], "agent")?;
        let x = num(fields[2], "x")?;
        let y = num(fields[3], "y")?;
        if (frame_f - frame_f.round()).abs() > 1e-9 || (agent_f - agent_f.round()).abs() > 1e-9 {
            return Err(Error::Parse { line: lineno, msg: "frame and agent ids must be integral".into() });
        }
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::Parse { line: lineno, msg: "non-finite position".into() });
        }
        rows.push(Row { frame: frame_f.round() as i64, agent: agent_f.round() as i64, pos: Point2::new(x, y) });
    }
    Ok(rows)
}

/// Loads a TrajNet-format file and slides prediction windows.
pub fn load_trajnet(path: &Path, windowing: TrajnetWindowing) -> Result<Vec<Scene>> {
    let text = std::fs::read_to_string(path)?;
    load_trajnet_str(&text, windowing)
}

pub fn load_trajnet_str(text: &str, windowing: TrajnetWindowing) -> Result<Vec<Scene>> {
    let rows = parse_rows(text)?;
    let window = windowing.t_obs + windowing.t_fut;

    // Group rows per agent in file order; frames must strictly increase.
    let mut agents: Vec<i64> = Vec::new();
    let mut tracks: HashMap<i64, Vec<(i64, Point2)>> = HashMap::new();
    for r in &rows {
        let track = tracks.entry(r.agent).or_insert_with(|| {
            agents.push(r.agent);
            Vec::new()
        });
        if let Some(&(last, _)) = track.last() {
            if r.frame <= last {
                return Err(Error::Parse {
                    line: 0,
                    msg: format!(
                        "non-monotone frames for agent {}: {} after {}",
                        r.agent, r.frame, last
                    ),
                });
            }
        }
        track.push((r.frame, r.pos));
    }

    // Base frame delta: the smallest positive delta in the file.
    let mut delta = i64::MAX;
    for track in tracks.values() {
        for w in track.windows(2) {
            delta = delta.min(w[1].0 - w[0].0);
        }
    }
    if delta == i64::MAX {
        delta = 1;
    }

    // Position lookup for neighbor attachment.
    let mut by_frame: HashMap<(i64, i64), Point2> = HashMap::new();
    for (&agent, track) in &tracks {
        for &(frame, pos) in track {
            by_frame.insert((agent, frame), pos);
        }
    }

    let mut scenes = Vec::new();
    for &agent in &agents {
        let track = &tracks[&agent];
        // Maximal gap-free runs (consecutive frames delta apart).
        let mut run_start = 0;
        let mut runs: Vec<(usize, usize)> = Vec::new();
        for i in 1..=track.len() {
            if i == track.len() || track[i].0 - track[i - 1].0 != delta {
                runs.push((run_start, i));
                run_start = i;
            }
        }
        for (start, end) in runs {
            let len = end - start;
            if len < window {
                continue;
            }
            for s in start..=end - window {
                let observed: Trajectory =
                    track[s..s + windowing.t_obs].iter().map(|&(_, p)| p).collect();
                let future: Trajectory = track[s + windowing.t_obs..s + window]
                    .iter()
                    .map(|&(_, p)| p)
                    .collect();
                let t_frame = track[s + windowing.t_obs - 1].0;
                let mut neighbors = Vec::new();
                for &other in &agents {
                    if other == agent {
                        continue;
                    }
                    if let Some(&pos) = by_frame.get(&(other, t_frame)) {
                        let velocity = by_frame
                            .get(&(other, t_frame - delta))
                            .map_or(Point2::ZERO, |&prev| pos - prev);
                        neighbors.push(NeighborState { position: pos, velocity });
                    }
                }
                scenes.push(Scene { observed, future, neighbors });
            }
        }
    }
    Ok(scenes)
}

/// Writes trajectories in TrajNet format, one agent per trajectory. Agents
/// are given disjoint frame ranges so loaded windows never pick up spurious
/// neighbors between independently generated trajectories.
pub fn write_trajnet(trajectories: &[Trajectory], path: &Path) -> Result<()> {
    let mut out = String::new();
    format_trajnet(trajectories, &mut out);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn format_trajnet(trajectories: &[Trajectory], out: &mut String) {
    use std::fmt::Write;
    let mut frame_base = 0i64;
    for (agent, traj) in trajectories.iter().enumerate() {
        for (k, p) in traj.iter().enumerate() {
            writeln!(out, "{} {} {:.17e} {:.17e}", frame_base + k as i64, agent, p.x, p.y).unwrap();
        }
        frame_base += traj.len() as i64 + 10;
    }
}

/// Leave-one-out split over scene file names (matched by file stem).
pub fn leave_one_out_split<'a>(
    scene_files: &'a [std::path::PathBuf],
    held_out: &str,
) -> Result<(Vec<&'a std::path::PathBuf>, Vec<&'a std::path::PathBuf>)> {
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
    if !scene_files.iter().any(|f| stem(f) == held_out) {
        return Err(Error::InvalidConfig(format!(
            "unknown scene '{held_out}'; available: {}",
            scene_files.iter().map(|f| stem(f)).collect::<Vec<_>>().join(", ")
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for f in scene_files {
        if stem(f) == held_out {
            test.push(f);
        } else {
            train.push(f);
        }
    }
    Ok((train, test))
}
