//! Line-delimited corpus files: a JSON header followed by one JSON record
//! per user. Writing then reading reproduces the corpus bit-exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, MovementAttributes, PatternLabel, Trajectory};
use super::error::DataError;
use super::grid::GridSpec;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    rows: usize,
    cols: usize,
    cell_km: f64,
    t_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    user_id: String,
    pattern_label: PatternLabel,
    home_cell: usize,
    commute_cell: usize,
    cells: Vec<usize>,
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = Header {
        rows: corpus.grid.rows,
        cols: corpus.grid.cols,
        cell_km: corpus.grid.cell_km,
        t_len: corpus.t_len,
        split: corpus.split.clone(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for (traj, attrs) in &corpus.members {
        let rec = Record {
            user_id: traj.user_id.clone(),
            pattern_label: attrs.pattern_label,
            home_cell: attrs.home_cell,
            commute_cell: attrs.commute_cell,
            cells: traj.cells.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Corpus, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();

    let (_, header_line) = lines.next().ok_or(DataError::MissingHeader)?;
    let header_line = header_line?;
    let header: Header =
        serde_json::from_str(&header_line).map_err(|e| DataError::MalformedLine {
            line: 1,
            message: e.to_string(),
        })?;
    let grid = GridSpec::new(header.rows, header.cols, header.cell_km);

    let mut members = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let rec: Record = serde_json::from_str(&line).map_err(|e| DataError::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        if rec.cells.len() != header.t_len {
            return Err(DataError::LineLengthMismatch {
                line: line_no,
                got: rec.cells.len(),
                want: header.t_len,
            });
        }
        for cell in rec
            .cells
            .iter()
            .copied()
            .chain([rec.home_cell, rec.commute_cell])
        {
            if !grid.contains(cell) {
                return Err(DataError::LineCellOutOfRange {
                    line: line_no,
                    cell,
                    max: grid.cell_count(),
                });
            }
        }
        members.push((
            Trajectory {
                user_id: rec.user_id,
                cells: rec.cells,
            },
            MovementAttributes {
                home_cell: rec.home_cell,
                commute_cell: rec.commute_cell,
                pattern_label: rec.pattern_label,
            },
        ));
    }
    let mut corpus = Corpus::new(grid, header.t_len, members)?;
    corpus.split = header.split;
    Ok(corpus)
}
