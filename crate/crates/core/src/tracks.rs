//! Ground-truth meta: per-frame events, the bottom-compacted stacked-tracks
//! tensor, and the DCASE-style meta CSV.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{azel_to_doa, doa_to_azel, AzEl, Doa};

/// Label frame rate of meta files (100 ms frames).
pub const LABEL_FPS: usize = 10;

/// One active event in one label frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameEvent {
    pub frame: usize,
    pub track_id: usize,
    pub class_id: usize,
    pub doa: Doa,
}

/// `N × T` grid of `(xyz, class)` cells, bottom-compacted per frame.
///
/// An empty cell is the origin with class index `K` (the number of classes).
/// Row 0 is the bottom row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedTracks {
    n_tracks: usize,
    n_frames: usize,
    n_classes: usize,
    doas: Vec<Doa>,
    classes: Vec<usize>,
}

impl StackedTracks {
    pub fn empty(n_tracks: usize, n_frames: usize, n_classes: usize) -> Self {
        Self {
            n_tracks,
            n_frames,
            n_classes,
            doas: vec![Doa::ORIGIN; n_tracks * n_frames],
            classes: vec![n_classes; n_tracks * n_frames],
        }
    }

    /// Builds a tensor from explicit cells, row-major `[row][frame]`.
    ///
    /// Only the structural invariants are checked (origin ⇔ class `K`,
    /// bottom compaction); direction norms are left to the caller.
    pub fn from_cells(
        n_tracks: usize,
        n_frames: usize,
        n_classes: usize,
        cells: Vec<(Doa, usize)>,
    ) -> Result<Self> {
        if cells.len() != n_tracks * n_frames {
            return Err(Error::Shape(format!(
                "expected {} cells, got {}",
                n_tracks * n_frames,
                cells.len()
            )));
        }
        let (doas, classes) = cells.into_iter().unzip();
        let st = Self {
            n_tracks,
            n_frames,
            n_classes,
            doas,
            classes,
        };
        st.check_structure()?;
        Ok(st)
    }

    pub fn n_tracks(&self) -> usize {
        self.n_tracks
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn idx(&self, row: usize, frame: usize) -> usize {
        row * self.n_frames + frame
    }

    pub fn cell(&self, row: usize, frame: usize) -> (Doa, usize) {
        let i = self.idx(row, frame);
        (self.doas[i], self.classes[i])
    }

    pub fn is_empty_cell(&self, row: usize, frame: usize) -> bool {
        self.classes[self.idx(row, frame)] == self.n_classes
    }

    pub fn set_cell(&mut self, row: usize, frame: usize, doa: Doa, class: usize) {
        let i = self.idx(row, frame);
        self.doas[i] = doa;
        self.classes[i] = class;
    }

    pub fn clear_cell(&mut self, row: usize, frame: usize) {
        let k = self.n_classes;
        self.set_cell(row, frame, Doa::ORIGIN, k);
    }

    /// Number of non-empty rows in `frame`.
    pub fn occupancy(&self, frame: usize) -> usize {
        (0..self.n_tracks)
            .take_while(|&r| !self.is_empty_cell(r, frame))
            .count()
    }

    /// Non-empty cells of a frame, bottom to top.
    pub fn frame_cells(&self, frame: usize) -> Vec<(Doa, usize)> {
        (0..self.occupancy(frame))
            .map(|r| self.cell(r, frame))
            .collect()
    }

    pub fn frame_doas(&self, frame: usize) -> Vec<Doa> {
        self.frame_cells(frame).into_iter().map(|(d, _)| d).collect()
    }

    pub fn max_occupancy(&self) -> usize {
        (0..self.n_frames)
            .map(|t| self.occupancy(t))
            .max()
            .unwrap_or(0)
    }

    /// Sub-range of frames `[start, start + len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.n_frames {
            return Err(Error::Shape(format!(
                "frame slice {start}..{} exceeds {} frames",
                start + len,
                self.n_frames
            )));
        }
        let mut out = Self::empty(self.n_tracks, len, self.n_classes);
        for r in 0..self.n_tracks {
            for t in 0..len {
                let (d, c) = self.cell(r, start + t);
                out.set_cell(r, t, d, c);
            }
        }
        Ok(out)
    }

    /// Re-compacts every frame so that occupied cells sit at the bottom,
    /// preserving their relative order.
    pub fn compact(&mut self) {
        for t in 0..self.n_frames {
            let cells: Vec<(Doa, usize)> = (0..self.n_tracks)
                .map(|r| self.cell(r, t))
                .filter(|&(_, c)| c != self.n_classes)
                .collect();
            for r in 0..self.n_tracks {
                match cells.get(r) {
                    Some(&(d, c)) => self.set_cell(r, t, d, c),
                    None => self.clear_cell(r, t),
                }
            }
        }
    }

    /// Moves old row `perm[n]` to row `n` for the whole tensor, then
    /// re-compacts.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.n_tracks];
        if perm.len() != self.n_tracks
            || perm
                .iter()
                .any(|&p| p >= self.n_tracks || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Shape(format!(
                "{perm:?} is not a permutation of {} rows",
                self.n_tracks
            )));
        }
        let mut out = Self::empty(self.n_tracks, self.n_frames, self.n_classes);
        for (dst, &src) in perm.iter().enumerate() {
            for t in 0..self.n_frames {
                let (d, c) = self.cell(src, t);
                out.set_cell(dst, t, d, c);
            }
        }
        out.compact();
        Ok(out)
    }

    fn check_structure(&self) -> Result<()> {
        for t in 0..self.n_frames {
            let mut seen_empty = false;
            for r in 0..self.n_tracks {
                let (d, c) = self.cell(r, t);
                let empty = c == self.n_classes;
                if c > self.n_classes {
                    return Err(Error::Invariant(format!(
                        "class {c} at row {r}, frame {t} exceeds K = {}",
                        self.n_classes
                    )));
                }
                if empty != d.is_origin() {
                    return Err(Error::Invariant(format!(
                        "row {r}, frame {t}: origin must coincide with class K"
                    )));
                }
                if !empty && seen_empty {
                    return Err(Error::Invariant(format!(
                        "frame {t} is not bottom-compacted"
                    )));
                }
                seen_empty |= empty;
            }
        }
        Ok(())
    }

    /// Full invariant check, including unit norm of every occupied cell.
    pub fn validate(&self) -> Result<()> {
        self.check_structure()?;
        for (d, &c) in self.doas.iter().zip(&self.classes) {
            if c != self.n_classes {
                d.ensure_unit()?;
            }
        }
        Ok(())
    }

    /// Converts back to per-frame events; the track id is the row index.
    pub fn to_events(&self) -> Vec<FrameEvent> {
        let mut out = Vec::new();
        for t in 0..self.n_frames {
            for (r, (doa, class_id)) in self.frame_cells(t).into_iter().enumerate() {
                out.push(FrameEvent {
                    frame: t,
                    track_id: r,
                    class_id,
                    doa,
                });
            }
        }
        out
    }

    /// Row-major `N × T × 4` float tensor `(x, y, z, class)`.
    pub fn to_tensor(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.doas.len() * 4);
        for (d, &c) in self.doas.iter().zip(&self.classes) {
            out.extend_from_slice(&[d.x as f32, d.y as f32, d.z as f32, c as f32]);
        }
        out
    }
}

fn check_event(e: &FrameEvent, n_frames: usize, n_classes: usize) -> Result<()> {
    if e.frame >= n_frames {
        return Err(Error::Range(format!(
            "event frame {} outside 0..{n_frames}",
            e.frame
        )));
    }
    if e.class_id >= n_classes {
        return Err(Error::Range(format!(
            "class {} outside 0..{n_classes}",
            e.class_id
        )));
    }
    e.doa.ensure_unit()?;
    Ok(())
}

fn group_by_frame(events: &[FrameEvent]) -> Result<BTreeMap<usize, Vec<FrameEvent>>> {
    let mut seen = HashSet::new();
    let mut frames: BTreeMap<usize, Vec<FrameEvent>> = BTreeMap::new();
    for e in events {
        if !seen.insert((e.frame, e.track_id)) {
            return Err(Error::DuplicateEvent {
                frame: e.frame,
                track: e.track_id,
            });
        }
        frames.entry(e.frame).or_default().push(*e);
    }
    for list in frames.values_mut() {
        list.sort_by_key(|e| e.track_id);
    }
    Ok(frames)
}

/// Builds the `N × T` stacked-tracks tensor.
///
/// In every frame the active events, ordered by track id, fill rows
/// `0, 1, …` from the bottom; events beyond `N` (highest track ids) are
/// dropped.
pub fn stack_tracks(
    events: &[FrameEvent],
    n_tracks: usize,
    n_frames: usize,
    n_classes: usize,
) -> Result<StackedTracks> {
    for e in events {
        check_event(e, n_frames, n_classes)?;
    }
    let mut st = StackedTracks::empty(n_tracks, n_frames, n_classes);
    for (frame, list) in group_by_frame(events)? {
        for (row, e) in list.iter().take(n_tracks).enumerate() {
            st.set_cell(row, frame, e.doa, e.class_id);
        }
    }
    Ok(st)
}

/// Random row permutation followed by re-compaction.
pub fn permute_and_restack<R: Rng + ?Sized>(st: &StackedTracks, rng: &mut R) -> StackedTracks {
    let mut perm: Vec<usize> = (0..st.n_tracks()).collect();
    perm.shuffle(rng);
    st.permute_rows(&perm)
        .expect("shuffled identity is a permutation")
}

/// Keeps at most `max_overlap` events per frame, lowest track ids first.
/// Input order of the kept events is preserved.
pub fn truncate_overlap(events: &[FrameEvent], max_overlap: usize) -> Vec<FrameEvent> {
    let mut per_frame: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for e in events {
        per_frame.entry(e.frame).or_default().push(e.track_id);
    }
    let keep: HashSet<(usize, usize)> = per_frame
        .into_iter()
        .flat_map(|(frame, mut ids)| {
            ids.sort_unstable();
            ids.into_iter().take(max_overlap).map(move |id| (frame, id))
        })
        .collect();
    events
        .iter()
        .filter(|e| keep.contains(&(e.frame, e.track_id)))
        .copied()
        .collect()
}

/// Canonical angle text: six decimals, trailing zeros trimmed.
fn fmt_angle(v: f64) -> String {
    let mut s = format!("{v:.6}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

/// Serializes events as `frame,class,track,azimuth_deg,elevation_deg` rows.
pub fn format_meta(events: &[FrameEvent]) -> Result<String> {
    let mut out = String::new();
    for e in events {
        let a = doa_to_azel(e.doa)?;
        // azimuth is undefined at the poles
        let az = if a.elevation.abs() >= 90.0 { 0.0 } else { a.azimuth };
        writeln!(
            out,
            "{},{},{},{},{}",
            e.frame,
            e.class_id,
            e.track_id,
            fmt_angle(az),
            fmt_angle(a.elevation)
        )
        .expect("writing to a String cannot fail");
    }
    Ok(out)
}

/// Parses meta rows; `source` only labels error messages.
pub fn parse_meta(text: &str, n_classes: usize, source: &str) -> Result<Vec<FrameEvent>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let int = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|e| err(format!("bad {what} `{s}`: {e}")))
        };
        let real = |s: &str, what: &str| {
            s.parse::<f64>()
                .map_err(|e| err(format!("bad {what} `{s}`: {e}")))
        };
        let frame = int(fields[0], "frame")?;
        let class_id = int(fields[1], "class")?;
        let track_id = int(fields[2], "track")?;
        if class_id >= n_classes {
            return Err(err(format!("class {class_id} >= K = {n_classes}")));
        }
        let azel = AzEl::new(real(fields[3], "azimuth")?, real(fields[4], "elevation")?);
        let doa = azel_to_doa(azel).map_err(|e| err(e.to_string()))?;
        out.push(FrameEvent {
            frame,
            track_id,
            class_id,
            doa,
        });
    }
    Ok(out)
}

pub fn read_meta_csv(path: &Path, n_classes: usize) -> Result<Vec<FrameEvent>> {
    let text = std::fs::read_to_string(path)?;
    parse_meta(&text, n_classes, &path.display().to_string())
}

pub fn write_meta_csv(events: &[FrameEvent], path: &Path) -> Result<()> {
    std::fs::write(path, format_meta(events)?)?;
    Ok(())
}

/// The five-track example used throughout the tests: 13 classes, 8 frames,
/// maximal overlap 3. Directions are the raw printed values (not unit norm).
#[doc(hidden)]
pub fn example_tracks_raw() -> Vec<FrameEvent> {
    let raw: &[(usize, usize, usize, [f64; 3])] = &[
        // (track, frame, class, xyz)
        (4, 1, 3, [0.2, 0.7, -0.2]),
        (4, 2, 3, [0.2, 0.8, -0.1]),
        (3, 2, 7, [0.5, -0.7, 0.5]),
        (3, 3, 7, [0.5, -0.7, 0.5]),
        (3, 4, 7, [0.5, -0.7, 0.5]),
        (3, 5, 7, [0.6, -0.7, 0.4]),
        (3, 6, 7, [0.6, -0.7, 0.4]),
        (2, 0, 3, [-0.5, 0.6, 0.3]),
        (2, 1, 3, [-0.4, 0.7, 0.3]),
        (2, 2, 3, [-0.4, 0.7, 0.3]),
        (2, 3, 3, [-0.4, 0.8, 0.3]),
        (2, 4, 3, [-0.3, 0.8, 0.4]),
        (1, 6, 11, [0.7, 0.5, -0.5]),
        (1, 7, 11, [0.7, 0.5, -0.5]),
        (0, 3, 8, [-0.9, 0.2, 0.1]),
        (0, 4, 8, [-0.9, 0.2, 0.1]),
        (0, 5, 8, [-0.8, 0.2, 0.2]),
    ];
    raw.iter()
        .map(|&(track_id, frame, class_id, xyz)| FrameEvent {
            frame,
            track_id,
            class_id,
            doa: Doa::from_array(xyz),
        })
        .collect()
}
