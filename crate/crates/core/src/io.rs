//! Expression matrix container and tab-separated file I/O.

use crate::error::{Error, Result};
use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

/// Cells × genes non-negative expression values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionMatrix {
    pub cell_ids: Vec<String>,
    pub gene_ids: Vec<String>,
    values: Vec<f64>,
}

impl ExpressionMatrix {
    pub fn new(cell_ids: Vec<String>, gene_ids: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if values.len() != cell_ids.len() * gene_ids.len() {
            return Err(Error::shape(format!(
                "{} cells × {} genes needs {} values, got {}",
                cell_ids.len(),
                gene_ids.len(),
                cell_ids.len() * gene_ids.len(),
                values.len()
            )));
        }
        let m = ExpressionMatrix {
            cell_ids,
            gene_ids,
            values,
        };
        m.check_unique()?;
        Ok(m)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for id in &self.cell_ids {
            if !seen.insert(id) {
                return Err(Error::data(format!("duplicate cell id {id}")));
            }
        }
        let mut seen = HashSet::new();
        for id in &self.gene_ids {
            if !seen.insert(id) {
                return Err(Error::data(format!("duplicate gene id {id}")));
            }
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.cell_ids.len()
    }

    pub fn n_genes(&self) -> usize {
        self.gene_ids.len()
    }

    pub fn row(&self, cell: usize) -> &[f64] {
        let g = self.n_genes();
        &self.values[cell * g..(cell + 1) * g]
    }

    pub fn column(&self, gene: usize) -> Vec<f64> {
        let g = self.n_genes();
        (0..self.n_cells()).map(|c| self.values[c * g + gene]).collect()
    }

    pub fn cell_index(&self, id: &str) -> Option<usize> {
        self.cell_ids.iter().position(|c| c == id)
    }

    /// Row-subset view as a new matrix (used for per-cell-type slices).
    pub fn subset_cells(&self, rows: &[usize]) -> Result<ExpressionMatrix> {
        let mut values = Vec::with_capacity(rows.len() * self.n_genes());
        let mut cell_ids = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= self.n_cells() {
                return Err(Error::data(format!("cell row {r} out of range")));
            }
            cell_ids.push(self.cell_ids[r].clone());
            values.extend_from_slice(self.row(r));
        }
        ExpressionMatrix::new(cell_ids, self.gene_ids.clone(), values)
    }
}

/// 17 significant digits: round-trips every finite f64 exactly.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn save_matrix(matrix: &ExpressionMatrix, path: &Path) -> Result<()> {
    let mut out = String::from("cell");
    for g in &matrix.gene_ids {
        out.push('\t');
        out.push_str(g);
    }
    out.push('\n');
    for (ci, cell) in matrix.cell_ids.iter().enumerate() {
        out.push_str(cell);
        for &v in matrix.row(ci) {
            let _ = write!(out, "\t{}", format_value(v));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_matrix(path: &Path) -> Result<ExpressionMatrix> {
    let text = std::fs::read_to_string(path)?;
    let pstr = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: pstr.clone(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let mut cols = header.split('\t');
    match cols.next() {
        Some("cell") => {}
        _ => {
            return Err(Error::Parse {
                path: pstr,
                line: 1,
                msg: "header must start with 'cell'".into(),
            })
        }
    }
    let gene_ids: Vec<String> = cols.map(str::to_string).collect();
    let mut cell_ids = Vec::new();
    let mut values = Vec::new();
    for (ln, line) in lines {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let cell = fields.next().unwrap().to_string();
        let row: Vec<f64> = fields
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    path: pstr.clone(),
                    line: ln + 1,
                    msg: format!("non-numeric value '{f}'"),
                })
            })
            .collect::<Result<_>>()?;
        if row.len() != gene_ids.len() {
            return Err(Error::Parse {
                path: pstr,
                line: ln + 1,
                msg: format!("expected {} values, found {}", gene_ids.len(), row.len()),
            });
        }
        cell_ids.push(cell);
        values.extend(row);
    }
    ExpressionMatrix::new(cell_ids, gene_ids, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(name);
        std::mem::forget(dir); // keep alive for the test process
        p
    }

    #[test]
    fn empty_matrix_round_trips() {
        let m = ExpressionMatrix::new(vec![], vec!["g1".into(), "g2".into()], vec![]).unwrap();
        let p = tmpfile("empty.tsv");
        save_matrix(&m, &p).unwrap();
        assert_eq!(load_matrix(&p).unwrap(), m);
    }

    #[test]
    fn single_value_round_trips() {
        let m =
            ExpressionMatrix::new(vec!["c1".into()], vec!["g1".into()], vec![3.25]).unwrap();
        let p = tmpfile("one.tsv");
        save_matrix(&m, &p).unwrap();
        assert_eq!(load_matrix(&p).unwrap(), m);
    }

    #[test]
    fn random_matrix_round_trips_bit_exact() {
        let mut rng = stream(11, "io-roundtrip", 0, 0);
        let values: Vec<f64> = (0..100 * 50).map(|_| rng.gen_range(0.0..10.0)).collect();
        let cells = (0..100).map(|i| format!("c{i}")).collect();
        let genes = (0..50).map(|i| format!("g{i}")).collect();
        let m = ExpressionMatrix::new(cells, genes, values).unwrap();
        let p = tmpfile("rand.tsv");
        save_matrix(&m, &p).unwrap();
        let back = load_matrix(&p).unwrap();
        assert_eq!(back, m); // exact f64 equality
    }

    #[test]
    fn ragged_row_is_a_parse_error_with_line_number() {
        let p = tmpfile("ragged.tsv");
        std::fs::write(&p, "cell\tg1\tg2\nc1\t1.0\n").unwrap();
        match load_matrix(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_rejected() {
        let p = tmpfile("bad.tsv");
        std::fs::write(&p, "cell\tg1\nc1\tabc\n").unwrap();
        assert!(matches!(load_matrix(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let p = tmpfile("dup.tsv");
        std::fs::write(&p, "cell\tg1\nc1\t1.0\nc1\t2.0\n").unwrap();
        assert!(matches!(load_matrix(&p), Err(Error::Data(_))));
    }
}
