//! EchoNet-Dynamic style tables: the clip list (`FileList.csv`), the LV
//! tracings (`VolumeTracings.csv`) and the auxiliary five-landmark table.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{load_frame_dir, Frame};
use crate::landmarks::schema::{LandmarkId, Visibility, NUM_LANDMARKS, TRACING_ROWS};

/// Frame rate assumed when the file table has no `FPS` column.
pub const DEFAULT_ECHONET_FPS: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("unknown split token {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EchoNetClip {
    pub clip_id: String,
    pub fps: f64,
    pub ef_label: f64,
    pub split: Split,
    /// Empty until [`EchoNetClip::load_frames`] is called.
    pub frames: Vec<Frame>,
}

impl EchoNetClip {
    /// Load frames from `<root>/<clip_id>/*.png`.
    pub fn load_frames(&mut self, root: &Path) -> Result<()> {
        self.frames = load_frame_dir(&root.join(&self.clip_id))?;
        Ok(())
    }
}

/// Sparse landmark annotation of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkAnnotation {
    pub clip_id: String,
    pub frame_index: usize,
    pub points: BTreeMap<LandmarkId, Point>,
    pub visibility: BTreeMap<LandmarkId, Visibility>,
}

/// One dense training target: a point with its grade, and whether it is
/// still inside the frame after augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkTarget {
    pub point: Point,
    pub visibility: Visibility,
    pub in_bounds: bool,
}

impl LandmarkAnnotation {
    pub fn new(clip_id: impl Into<String>, frame_index: usize) -> Self {
        Self {
            clip_id: clip_id.into(),
            frame_index,
            points: BTreeMap::new(),
            visibility: BTreeMap::new(),
        }
    }

    pub(crate) fn insert(&mut self, id: LandmarkId, point: Point, vis: Visibility) -> Result<()> {
        if self.points.insert(id, point).is_some() {
            return Err(Error::DuplicateLandmark {
                clip_id: self.clip_id.clone(),
                frame: self.frame_index,
                landmark: id.name(),
            });
        }
        self.visibility.insert(id, vis);
        Ok(())
    }

    /// Dense 47-slot target list; unannotated slots are `None`.
    pub fn targets(&self) -> Vec<Option<LandmarkTarget>> {
        let mut out = vec![None; NUM_LANDMARKS];
        for (id, p) in &self.points {
            out[id.index()] = Some(LandmarkTarget {
                point: *p,
                visibility: self.visibility.get(id).copied().unwrap_or(Visibility::High),
                in_bounds: true,
            });
        }
        out
    }
}

/// Strip a file extension: `vid.avi` and `vid` both name clip `vid`.
pub fn clip_id_from_filename(name: &str) -> String {
    let name = name.trim();
    Path::new(name)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(name)
        .to_string()
}

struct Table {
    headers: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read<R: Read>(reader: R, what: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::Parse(format!("{what}: {e}")))?
            .iter()
            .map(|h| h.trim_start_matches('\u{feff}').to_string())
            .collect();
        let rows = rdr
            .records()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("{what}: {e}")))?;
        Ok(Self { headers, rows })
    }

    fn column(&self, name: &str, what: &str) -> Result<usize> {
        self.optional_column(name)
            .ok_or_else(|| Error::Parse(format!("{what}: missing column {name}")))
    }

    fn optional_column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h.eq_ignore_ascii_case(name))
    }
}

fn field<'a>(row: &'a csv::StringRecord, col: usize, line: usize, what: &str) -> Result<&'a str> {
    row.get(col)
        .ok_or_else(|| Error::Parse(format!("{what} row {line}: missing field {col}")))
}

fn number<T: FromStr>(row: &csv::StringRecord, col: usize, line: usize, what: &str) -> Result<T> {
    let raw = field(row, col, line, what)?;
    raw.parse()
        .map_err(|_| Error::Parse(format!("{what} row {line}: bad number {raw:?}")))
}

fn coordinate(row: &csv::StringRecord, col: usize, line: usize, what: &str) -> Result<f64> {
    let v: f64 = number(row, col, line, what)?;
    if !v.is_finite() {
        return Err(Error::Parse(format!("{what} row {line}: non-finite coordinate")));
    }
    Ok(v)
}

/// Parse the clip list. Columns `FileName`, `EF`, `Split` are required;
/// `FPS` is used when present.
pub fn parse_file_table<R: Read>(reader: R) -> Result<Vec<EchoNetClip>> {
    const WHAT: &str = "file table";
    let table = Table::read(reader, WHAT)?;
    let name_col = table.column("FileName", WHAT)?;
    let ef_col = table.column("EF", WHAT)?;
    let split_col = table.column("Split", WHAT)?;
    let fps_col = table.optional_column("FPS");
    table
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let line = i + 2;
            let ef_label: f64 = number(row, ef_col, line, WHAT)?;
            if !(0.0..=100.0).contains(&ef_label) {
                return Err(Error::Parse(format!("{WHAT} row {line}: EF {ef_label} outside [0, 100]")));
            }
            let fps = match fps_col {
                Some(c) => number(row, c, line, WHAT)?,
                None => DEFAULT_ECHONET_FPS,
            };
            if !(fps.is_finite() && fps > 0.0) {
                return Err(Error::Parse(format!("{WHAT} row {line}: fps must be positive")));
            }
            Ok(EchoNetClip {
                clip_id: clip_id_from_filename(field(row, name_col, line, WHAT)?),
                fps,
                ef_label,
                split: field(row, split_col, line, WHAT)?.parse()?,
                frames: Vec::new(),
            })
        })
        .collect()
}

/// Parse LV tracings. Each annotated frame must carry exactly 21 rows; row
/// `r` (in file order) becomes contour landmarks `2r` and `2r + 1`.
pub fn parse_tracing_table<R: Read>(reader: R) -> Result<Vec<LandmarkAnnotation>> {
    const WHAT: &str = "tracing table";
    let table = Table::read(reader, WHAT)?;
    let cols = ["FileName", "X1", "Y1", "X2", "Y2", "Frame"]
        .map(|c| table.column(c, WHAT))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<(String, usize)> = Vec::new();
    let mut groups: HashMap<(String, usize), Vec<[f64; 4]>> = HashMap::new();
    for (i, row) in table.rows.iter().enumerate() {
        let line = i + 2;
        let clip = clip_id_from_filename(field(row, cols[0], line, WHAT)?);
        let frame: usize = number(row, cols[5], line, WHAT)?;
        let seg = [
            coordinate(row, cols[1], line, WHAT)?,
            coordinate(row, cols[2], line, WHAT)?,
            coordinate(row, cols[3], line, WHAT)?,
            coordinate(row, cols[4], line, WHAT)?,
        ];
        let key = (clip, frame);
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(seg);
    }
    order
        .into_iter()
        .map(|key| {
            let segments = &groups[&key];
            let (clip_id, frame) = key;
            if segments.len() != TRACING_ROWS {
                return Err(Error::MalformedAnnotation {
                    clip_id,
                    frame,
                    detail: format!("expected {TRACING_ROWS} tracing rows, found {}", segments.len()),
                });
            }
            let mut ann = LandmarkAnnotation::new(clip_id, frame);
            for (r, [x1, y1, x2, y2]) in segments.iter().copied().enumerate() {
                ann.insert(LandmarkId::contour(2 * r)?, Point { x: x1, y: y1 }, Visibility::High)?;
                ann.insert(LandmarkId::contour(2 * r + 1)?, Point { x: x2, y: y2 }, Visibility::High)?;
            }
            Ok(ann)
        })
        .collect()
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

/// Parse the clip list and the tracing table from disk.
pub fn parse_echonet_annotations(
    file_table: &Path,
    tracing_table: &Path,
) -> Result<(Vec<EchoNetClip>, Vec<LandmarkAnnotation>)> {
    let clips = parse_file_table(open(file_table)?)?;
    let annotations = parse_tracing_table(open(tracing_table)?)?;
    Ok((clips, annotations))
}

/// Parse the auxiliary table (`FileName, Frame, Landmark, X, Y, Visibility`).
/// Only the five auxiliary landmark names are accepted.
pub fn parse_auxiliary_table<R: Read>(reader: R) -> Result<Vec<LandmarkAnnotation>> {
    const WHAT: &str = "auxiliary table";
    let table = Table::read(reader, WHAT)?;
    let cols = ["FileName", "Frame", "Landmark", "X", "Y", "Visibility"]
        .map(|c| table.column(c, WHAT))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<(String, usize)> = Vec::new();
    let mut by_frame: HashMap<(String, usize), LandmarkAnnotation> = HashMap::new();
    for (i, row) in table.rows.iter().enumerate() {
        let line = i + 2;
        let clip = clip_id_from_filename(field(row, cols[0], line, WHAT)?);
        let frame: usize = number(row, cols[1], line, WHAT)?;
        let name = field(row, cols[2], line, WHAT)?;
        let id = match name {
            "RV" | "RA" | "LA" | "TV" | "TVA" => name.parse::<LandmarkId>()?,
            other => {
                return Err(Error::Parse(format!(
                    "{WHAT} row {line}: unknown landmark name {other:?}"
                )))
            }
        };
        let point = Point {
            x: coordinate(row, cols[3], line, WHAT)?,
            y: coordinate(row, cols[4], line, WHAT)?,
        };
        let vis_raw: u8 = number(row, cols[5], line, WHAT)?;
        let vis = Visibility::try_from(vis_raw)
            .map_err(|_| Error::Parse(format!("{WHAT} row {line}: visibility {vis_raw} not in {{1,2,3}}")))?;
        let key = (clip.clone(), frame);
        by_frame
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                LandmarkAnnotation::new(clip, frame)
            })
            .insert(id, point, vis)?;
    }
    Ok(order
        .into_iter()
        .map(|k| by_frame.remove(&k).expect("every ordered key has an entry"))
        .collect())
}

pub fn parse_auxiliary_landmarks(aux_table: &Path) -> Result<Vec<LandmarkAnnotation>> {
    parse_auxiliary_table(open(aux_table)?)
}

/// Merge auxiliary annotations into contour annotations of the same
/// `(clip, frame)`. Auxiliary frames without contour rows are appended.
pub fn merge_annotations(
    contour: Vec<LandmarkAnnotation>,
    auxiliary: Vec<LandmarkAnnotation>,
) -> Result<Vec<LandmarkAnnotation>> {
    let mut merged = contour;
    let index: HashMap<(String, usize), usize> = merged
        .iter()
        .enumerate()
        .map(|(i, a)| ((a.clip_id.clone(), a.frame_index), i))
        .collect();
    for aux in auxiliary {
        match index.get(&(aux.clip_id.clone(), aux.frame_index)) {
            Some(&i) => {
                let target = &mut merged[i];
                for (id, p) in aux.points {
                    let vis = aux.visibility.get(&id).copied().unwrap_or(Visibility::High);
                    target.insert(id, p, vis)?;
                }
            }
            None => merged.push(aux),
        }
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tracing_rows(clip: &str, frame: usize, n: usize) -> String {
        let mut s = String::from("FileName,X1,Y1,X2,Y2,Frame\n");
        for r in 0..n {
            s += &format!("{clip},{},{},{},{},{frame}\n", r, r + 1, r + 2, r + 3);
        }
        s
    }

    #[test]
    fn tracing_row_maps_to_two_points() {
        let mut csv = String::from("FileName,X1,Y1,X2,Y2,Frame\n");
        csv += "vid.avi,10.1,20.2,30.3,40.4,46\n";
        for _ in 1..21 {
            csv += "vid.avi,1,1,2,2,46\n";
        }
        let anns = parse_tracing_table(csv.as_bytes()).unwrap();
        assert_eq!(anns.len(), 1);
        let a = &anns[0];
        assert_eq!(a.clip_id, "vid");
        assert_eq!(a.frame_index, 46);
        assert_eq!(a.points[&LandmarkId::contour(0).unwrap()], Point { x: 10.1, y: 20.2 });
        assert_eq!(a.points[&LandmarkId::contour(1).unwrap()], Point { x: 30.3, y: 40.4 });
        assert_eq!(a.points.len(), 42);
        assert!(a.visibility.values().all(|v| *v == Visibility::High));
    }

    #[test]
    fn twenty_rows_is_malformed() {
        let err = parse_tracing_table(tracing_rows("a.avi", 3, 20).as_bytes()).unwrap_err();
        match err {
            Error::MalformedAnnotation { clip_id, frame, .. } => {
                assert_eq!(clip_id, "a");
                assert_eq!(frame, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn two_frames_per_clip() {
        let mut csv = tracing_rows("a.avi", 3, 21);
        csv += &tracing_rows("a.avi", 40, 21).lines().skip(1).map(|l| format!("{l}\n")).collect::<String>();
        let anns = parse_tracing_table(csv.as_bytes()).unwrap();
        assert_eq!(anns.len(), 2);
        assert_eq!(anns[1].frame_index, 40);
    }

    #[test]
    fn file_table() {
        let csv = "FileName,EF,ESV,EDV,FrameHeight,FrameWidth,FPS,NumberOfFrames,Split\n\
                   0X1,55.5,1,2,112,112,50,201,TRAIN\n\
                   0X2,70,1,2,112,112,32,100,VAL\n";
        let clips = parse_file_table(csv.as_bytes()).unwrap();
        assert_eq!(clips.len(), 2);
        assert_eq!(clips[0].split, Split::Train);
        assert_eq!(clips[1].fps, 32.0);
        assert_eq!(clips[1].ef_label, 70.0);

        let bad = "FileName,EF,Split\nx,50,HOLDOUT\n";
        assert!(matches!(parse_file_table(bad.as_bytes()), Err(Error::Parse(_))));
        let bad_ef = "FileName,EF,Split\nx,150,TEST\n";
        assert!(parse_file_table(bad_ef.as_bytes()).is_err());
        let default_fps = parse_file_table("FileName,EF,Split\nx,50,test\n".as_bytes()).unwrap();
        assert_eq!(default_fps[0].fps, DEFAULT_ECHONET_FPS);
    }

    #[test]
    fn auxiliary_rows() {
        let csv = "FileName,Frame,Landmark,X,Y,Visibility\nvid.avi,46,LA,55,90,2\n";
        let anns = parse_auxiliary_table(csv.as_bytes()).unwrap();
        assert_eq!(anns[0].points[&LandmarkId::LA], Point { x: 55.0, y: 90.0 });
        assert_eq!(anns[0].visibility[&LandmarkId::LA], Visibility::Moderate);

        let bad_vis = "FileName,Frame,Landmark,X,Y,Visibility\nvid.avi,46,LA,55,90,4\n";
        assert!(matches!(parse_auxiliary_table(bad_vis.as_bytes()), Err(Error::Parse(_))));

        let bad_name = "FileName,Frame,Landmark,X,Y,Visibility\nvid.avi,46,LV03,55,90,1\n";
        assert!(matches!(parse_auxiliary_table(bad_name.as_bytes()), Err(Error::Parse(_))));

        let dup = "FileName,Frame,Landmark,X,Y,Visibility\nvid.avi,46,RV,1,1,1\nvid.avi,46,RV,2,2,1\n";
        match parse_auxiliary_table(dup.as_bytes()) {
            Err(Error::DuplicateLandmark { landmark, frame, .. }) => {
                assert_eq!(landmark, "RV");
                assert_eq!(frame, 46);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn merge_joins_same_frame() {
        let contour = parse_tracing_table(tracing_rows("vid.avi", 46, 21).as_bytes()).unwrap();
        let aux = parse_auxiliary_table(
            "FileName,Frame,Landmark,X,Y,Visibility\nvid.avi,46,LA,55,90,2\nvid.avi,9,RV,1,1,1\n".as_bytes(),
        )
        .unwrap();
        let merged = merge_annotations(contour, aux).unwrap();
        assert_eq!(merged.len(), 2);
        assert_eq!(merged[0].points.len(), 43);
        assert_eq!(merged[1].frame_index, 9);
        let targets = merged[0].targets();
        assert_eq!(targets.iter().filter(|t| t.is_some()).count(), 43);
    }
}
