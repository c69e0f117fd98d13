//! CSV input: numeric columns, optional header row, optional trailing label column.

use std::path::Path;

use gpcm::gaussian::DataMatrix;

use crate::CliError;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub data: DataMatrix,
    pub columns: Vec<String>,
    /// Values of a trailing non-numeric column, when present.
    pub labels: Option<Vec<String>>,
}

fn parses(field: &str) -> bool {
    field.trim().parse::<f64>().is_ok()
}

pub fn read_csv(path: &Path) -> Result<Dataset, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    parse_csv(&text)
}

/// Parses CSV text. A first row that does not parse as data is taken as
/// the header; a final column that is non-numeric in the first data row is
/// taken as labels.
pub fn parse_csv(text: &str) -> Result<Dataset, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut records = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| CliError::Validation(format!("malformed CSV: {e}")))?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let line = rec.position().map_or(0, |p| p.line());
        records.push((line, rec.iter().map(str::to_owned).collect::<Vec<_>>()));
    }
    if records.is_empty() {
        return Err(CliError::Validation("input has no rows".into()));
    }
    let width = records[0].1.len();
    // the header is the first row unless everything but its last field is numeric
    let head = &records[0].1;
    let is_header = if width == 1 {
        !parses(&head[0])
    } else {
        !head[..width - 1].iter().all(|f| parses(f))
    };
    let (columns, body) = if is_header {
        (head.clone(), &records[1..])
    } else {
        ((1..=width).map(|j| format!("x{j}")).collect::<Vec<_>>(), &records[..])
    };
    let first = body
        .first()
        .ok_or_else(|| CliError::Validation("input has a header but no data rows".into()))?;
    let has_labels = width > 1 && !parses(&first.1[width - 1]);
    let p = if has_labels { width - 1 } else { width };
    let mut rows = Vec::with_capacity(body.len());
    let mut labels = Vec::new();
    for (line, fields) in body {
        if fields.len() != width {
            return Err(CliError::Validation(format!(
                "line {line}: expected {width} fields, found {}",
                fields.len()
            )));
        }
        let mut row = Vec::with_capacity(p);
        for (j, f) in fields[..p].iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| {
                CliError::Validation(format!("line {line}, column {}: cannot parse `{f}` as a number", j + 1))
            })?;
            if !v.is_finite() {
                return Err(CliError::Validation(format!(
                    "line {line}, column {}: non-finite value",
                    j + 1
                )));
            }
            row.push(v);
        }
        rows.push(row);
        if has_labels {
            labels.push(fields[p].clone());
        }
    }
    let data = DataMatrix::from_rows(&rows).map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(Dataset {
        data,
        columns: columns[..p].to_vec(),
        labels: has_labels.then_some(labels),
    })
}

/// Fewest observations whose cluster disagrees with their label under the
/// best one-to-one matching of clusters to label values.
pub fn misallocations(clusters: &[usize], labels: &[String]) -> usize {
    let mut names: Vec<&String> = labels.iter().collect();
    names.sort();
    names.dedup();
    let k = clusters.iter().copied().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; names.len()]; k];
    for (c, l) in clusters.iter().zip(labels) {
        let j = names.binary_search(&l).expect("label present");
        table[*c][j] += 1;
    }
    fn best(table: &[Vec<usize>], row: usize, used: &mut [bool]) -> usize {
        if row == table.len() {
            return 0;
        }
        let mut top = best(table, row + 1, used);
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                top = top.max(table[row][j] + best(table, row + 1, used));
                used[j] = false;
            }
        }
        top
    }
    let agree = if k <= 8 && names.len() <= 10 {
        best(&table, 0, &mut vec![false; names.len()])
    } else {
        table.iter().map(|r| r.iter().copied().max().unwrap_or(0)).sum()
    };
    clusters.len() - agree
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_labels() {
        let d = parse_csv("a,b,species\n1,2,x\n3,4,y\n5,6.5,x\n").unwrap();
        assert_eq!(d.columns, vec!["a", "b"]);
        assert_eq!(d.data.n(), 3);
        assert_eq!(d.data.values()[(2, 1)], 6.5);
        assert_eq!(d.labels.unwrap(), vec!["x", "y", "x"]);
    }

    #[test]
    fn headerless_numeric() {
        let d = parse_csv("1,2\n3,4\n").unwrap();
        assert_eq!(d.columns, vec!["x1", "x2"]);
        assert!(d.labels.is_none());
        let d = parse_csv("1.5,2\n").unwrap();
        assert_eq!(d.data.n(), 1);
    }

    #[test]
    fn parse_error_names_position() {
        let err = parse_csv("a,b\n1,2\n3,oops\n").unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("column 2"), "{err}");
        let err = parse_csv("a,b\n1,2\n3\n").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn misallocation_matching() {
        let labels: Vec<String> = ["a", "a", "b", "b", "b"].iter().map(|s| s.to_string()).collect();
        assert_eq!(misallocations(&[1, 1, 0, 0, 0], &labels), 0);
        assert_eq!(misallocations(&[0, 1, 1, 1, 1], &labels), 1);
    }
}
