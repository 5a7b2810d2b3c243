use std::path::{Path, PathBuf};

use fem_core::golden::export_golden;

use crate::CliError;

/// Writes one `<op>.csv` per golden op into `dir`.
pub fn run_export_golden(dir: &Path, seed: u64, rows: usize) -> Result<Vec<PathBuf>, CliError> {
    if rows == 0 {
        return Err(CliError::Usage("--rows must be positive".into()));
    }
    Ok(export_golden(dir, seed, rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fem_core::golden::{import_golden, GoldenOp};

    #[test]
    fn every_op_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let paths = run_export_golden(dir.path(), 9, 3).unwrap();
        assert_eq!(paths.len(), GoldenOp::ALL.len());
        for p in paths {
            let table = import_golden(&p).unwrap();
            assert_eq!(table.rows.len(), 3);
            assert_eq!(table.max_deviation().unwrap(), 0.0);
        }
    }
}
