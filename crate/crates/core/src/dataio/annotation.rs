use std::fmt::Write as _;

use crate::geometry::Polygon;

/// Text instances of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub image_id: String,
    pub polygons: Vec<Polygon>,
    pub transcriptions: Vec<String>,
}

/// A rejected annotation line; parsing carries on with the next line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    /// 1-based.
    pub line: usize,
    pub msg: String,
}

impl std::fmt::Display for LineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.msg)
    }
}

fn parse_line(line: &str) -> Result<(Polygon, String), String> {
    let tokens: Vec<&str> = line.split(',').collect();
    let numeric = tokens.iter().take_while(|t| t.trim().parse::<f64>().is_ok()).count();
    if numeric == tokens.len() && numeric % 2 == 1 {
        return Err(format!("odd coordinate count {numeric}"));
    }
    let n = numeric - numeric % 2;
    if n < 6 {
        return Err(format!("need at least 3 points, found {}", n / 2));
    }
    let coords: Vec<(f64, f64)> =
        tokens[..n].chunks_exact(2).map(|p| (p[0].trim().parse().unwrap(), p[1].trim().parse().unwrap())).collect();
    let poly = Polygon::from_coords(&coords).map_err(|e| e.to_string())?;
    Ok((poly, tokens[n..].join(",")))
}

/// Parses `x1,y1,...,xn,yn,transcription` lines. The coordinates are the
/// longest even run of leading numeric fields; everything after them is the
/// transcription, commas included. Blank lines are skipped.
pub fn parse_annotations(image_id: &str, text: &str) -> (Annotation, Vec<LineError>) {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut ann = Annotation { image_id: image_id.to_string(), polygons: Vec::new(), transcriptions: Vec::new() };
    let mut errors = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line) {
            Ok((poly, text)) => {
                ann.polygons.push(poly);
                ann.transcriptions.push(text);
            }
            Err(msg) => errors.push(LineError { line: i + 1, msg }),
        }
    }
    (ann, errors)
}

impl Annotation {
    /// Canonical text form; `parse_annotations` reads it back unchanged as
    /// long as no transcription begins with a numeric field.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (poly, text) in self.polygons.iter().zip(&self.transcriptions) {
            for p in poly.vertices() {
                let _ = write!(s, "{},{},", p.x, p.y);
            }
            s.push_str(text);
            s.push('\n');
        }
        s
    }
}
