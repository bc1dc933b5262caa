//! Plain tabular output: delimiter-separated and column-aligned.

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push_row<S: Into<String>>(&mut self, row: impl IntoIterator<Item = S>) {
        let row: Vec<String> = row.into_iter().map(Into::into).collect();
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    /// One line per row, fields joined by `delimiter`, trailing newline.
    pub fn to_delimited(&self, delimiter: char) -> String {
        let mut out = String::new();
        for line in std::iter::once(&self.header).chain(self.rows.iter()) {
            let mut first = true;
            for field in line {
                if !first {
                    out.push(delimiter);
                }
                first = false;
                out.push_str(field);
            }
            out.push('\n');
        }
        out
    }

    /// Space-padded columns; the first column is left-aligned, the rest right-aligned.
    pub fn to_aligned(&self) -> String {
        let ncols = self.header.len();
        let mut widths = vec![0usize; ncols];
        for line in std::iter::once(&self.header).chain(self.rows.iter()) {
            for (w, field) in widths.iter_mut().zip(line) {
                *w = (*w).max(field.chars().count());
            }
        }
        let mut out = String::new();
        let render = |line: &Vec<String>, out: &mut String| {
            let mut cells = Vec::with_capacity(ncols);
            for (i, (field, w)) in line.iter().zip(&widths).enumerate() {
                if i == 0 {
                    cells.push(format!("{field:<w$}"));
                } else {
                    cells.push(format!("{field:>w$}"));
                }
            }
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        };
        render(&self.header, &mut out);
        let rule: usize = widths.iter().sum::<usize>() + 2 * ncols.saturating_sub(1);
        out.push_str(&"-".repeat(rule));
        out.push('\n');
        for row in &self.rows {
            render(row, &mut out);
        }
        out
    }

    /// Parses the output of [`Table::to_delimited`]; the first line is the header.
    pub fn parse_delimited(text: &str, delimiter: char) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Manifest("table has no header line".into()))?
            .split(delimiter)
            .map(str::to_owned)
            .collect();
        let mut table = Table {
            header,
            rows: Vec::new(),
        };
        for (i, line) in lines.enumerate() {
            let row: Vec<String> = line.split(delimiter).map(str::to_owned).collect();
            if row.len() != table.header.len() {
                return Err(Error::Manifest(format!(
                    "row {} has {} fields, header has {}",
                    i + 2,
                    row.len(),
                    table.header.len()
                )));
            }
            table.rows.push(row);
        }
        Ok(table)
    }
}
