//! Human-readable table renderings of report rows.

use std::path::Path;

use crate::error::CliError;

/// Writes `rows` (header first) as CSV.
pub fn write_csv(path: &Path, rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Renders `rows` (header first) as a pipe table.
pub fn markdown(rows: &[Vec<String>]) -> String {
    let Some((header, body)) = rows.split_first() else {
        return String::new();
    };
    let line = |cells: &[String]| format!("| {} |\n", cells.iter().map(|c| c.replace('|', "\\|")).collect::<Vec<_>>().join(" | "));
    let mut out = line(header);
    out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for row in body {
        out.push_str(&line(row));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pipe_table_layout() {
        let rows = vec![vec!["a".to_string(), "b".to_string()], vec!["1".to_string(), "x|y".to_string()]];
        assert_eq!(markdown(&rows), "| a | b |\n|---|---|\n| 1 | x\\|y |\n");
        assert_eq!(markdown(&[]), "");
    }
}
