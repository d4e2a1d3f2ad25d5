//! Per-frame CSV files: a `frame,x,y,w,h,visible` header, one line per
//! frame, `x,y,w,h` blank for an EMPTY box. An optional seventh `tags`
//! column carries `;`-separated attribute tags.

use std::io::{Read, Write};

use super::{BoundingBox, FrameAnnotation, MetricCurve, Prediction};
use crate::error::{Error, Result};

pub const HEADER: [&str; 6] = ["frame", "x", "y", "w", "h", "visible"];

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame: usize,
    pub bbox: Option<BoundingBox>,
    pub visible: bool,
    pub tags: Vec<String>,
}

impl FrameRecord {
    pub fn from_annotation(a: &FrameAnnotation) -> Self {
        FrameRecord {
            frame: a.frame_index,
            bbox: a.gt,
            visible: a.visible,
            tags: a.tags.clone(),
        }
    }

    pub fn from_prediction(frame: usize, p: &Prediction) -> Self {
        FrameRecord {
            frame,
            bbox: *p,
            visible: p.is_some(),
            tags: Vec::new(),
        }
    }

    pub fn to_annotation(&self) -> FrameAnnotation {
        FrameAnnotation {
            frame_index: self.frame,
            gt: self.bbox,
            visible: self.visible,
            tags: self.tags.clone(),
        }
    }

    /// A prediction is its box; the `visible` column is informational.
    pub fn to_prediction(&self) -> Prediction {
        self.bbox
    }
}

fn parse_err(line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        line: line as usize,
        msg: msg.into(),
    }
}

pub fn read_frames_str(text: &str) -> Result<Vec<FrameRecord>> {
    read_frames(text.as_bytes())
}

pub fn read_frames(r: impl Read) -> Result<Vec<FrameRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(r);
    let header = rdr
        .headers()
        .map_err(|e| parse_err(1, format!("unreadable header: {e}")))?
        .clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names.is_empty() || names == [""] {
        return Err(parse_err(1, "missing header line"));
    }
    let tagged = match names[..] {
        [ref six @ ..] if six == HEADER => false,
        [ref first @ .., "tags"] if first == HEADER => true,
        _ => {
            return Err(parse_err(
                1,
                format!("header must be `{}`, got `{}`", HEADER.join(","), names.join(",")),
            ))
        }
    };
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let n = rec.len();
        if n != 6 && !(tagged && n == 7) {
            return Err(parse_err(line, format!("expected 6 fields, found {n}")));
        }
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let frame = field(0)
            .parse::<usize>()
            .map_err(|e| parse_err(line, format!("frame index `{}`: {e}", field(0))))?;
        let coords: Vec<&str> = (1..5).map(field).collect();
        let bbox = if coords.iter().all(|c| c.is_empty()) {
            None
        } else {
            let v = coords
                .iter()
                .map(|c| c.parse::<f64>().map_err(|e| parse_err(line, format!("coordinate `{c}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            Some(BoundingBox::new(v[0], v[1], v[2], v[3]).map_err(|e| parse_err(line, e.to_string()))?)
        };
        let visible = match field(5) {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(parse_err(line, format!("visible must be 0/1, got `{other}`"))),
        };
        if visible && bbox.is_none() {
            return Err(parse_err(line, "visible frame without a box"));
        }
        let tags = if n == 7 {
            field(6)
                .split(';')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(String::from)
                .collect()
        } else {
            Vec::new()
        };
        out.push(FrameRecord {
            frame,
            bbox,
            visible,
            tags,
        });
    }
    if out.is_empty() {
        return Err(parse_err(2, "no frame records"));
    }
    Ok(out)
}

pub fn write_frames(records: &[FrameRecord], mut w: impl Write) -> Result<()> {
    let tagged = records.iter().any(|r| !r.tags.is_empty());
    let mut header = HEADER.join(",");
    if tagged {
        header.push_str(",tags");
    }
    writeln!(w, "{header}")?;
    for r in records {
        let coords = match r.bbox {
            Some(b) => format!("{},{},{},{}", b.x, b.y, b.w, b.h),
            None => ",,,".to_string(),
        };
        write!(w, "{},{},{}", r.frame, coords, u8::from(r.visible))?;
        if tagged {
            write!(w, ",{}", r.tags.join(";"))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// `threshold,value` rows under a header.
pub fn write_curve_csv(c: &MetricCurve, mut w: impl Write) -> Result<()> {
    writeln!(w, "threshold,value")?;
    for (t, v) in c.thresholds.iter().zip(&c.values) {
        writeln!(w, "{t},{v}")?;
    }
    Ok(())
}
