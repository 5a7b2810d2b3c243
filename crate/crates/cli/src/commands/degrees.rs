use fem_core::fem_read::min_truncation_degree;

use crate::CliError;

pub const RADII: [f64; 2] = [5.0, 10.0];
pub const EPSILONS: [f64; 3] = [1e-4, 1e-6, 1e-8];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegreeCell {
    pub r: f64,
    pub eps: f64,
    pub degree: usize,
    /// `ε·e^R`, which must stay at or below 1/2.
    pub safety: f64,
}

impl DegreeCell {
    pub fn safe(&self) -> bool {
        self.safety <= 0.5
    }
}

/// Rows follow [`RADII`], columns [`EPSILONS`].
pub fn table_degrees() -> Result<Vec<Vec<DegreeCell>>, CliError> {
    RADII
        .iter()
        .map(|&r| {
            EPSILONS
                .iter()
                .map(|&eps| Ok(DegreeCell { r, eps, degree: min_truncation_degree(r, eps)?, safety: eps * r.exp() }))
                .collect()
        })
        .collect()
}

pub fn format_table(rows: &[Vec<DegreeCell>]) -> String {
    let mut out = String::from("R \\ eps");
    for eps in EPSILONS {
        out += &format!("  {:>22}", format!("{eps:.0e}"));
    }
    out.push('\n');
    for row in rows {
        out += &format!("{:<7}", row.first().map(|c| c.r).unwrap_or(f64::NAN));
        for c in row {
            let flag = if c.safe() { "ok" } else { "UNSAFE" };
            out += &format!("  {:>22}", format!("N={} eps*e^R={:.1e} {flag}", c.degree, c.safety));
        }
        out.push('\n');
    }
    out
}

pub fn to_csv(rows: &[Vec<DegreeCell>]) -> String {
    let mut out = String::from("r,eps,degree,eps_exp_r,safe\n");
    for c in rows.iter().flatten() {
        out += &format!("{},{:e},{},{:e},{}\n", c.r, c.eps, c.degree, c.safety, c.safe());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_and_flags() {
        let rows = table_degrees().unwrap();
        let degrees: Vec<Vec<usize>> = rows.iter().map(|r| r.iter().map(|c| c.degree).collect()).collect();
        assert_eq!(degrees, vec![vec![19, 22, 25], vec![33, 36, 40]]);
        let c = rows[1][1];
        assert!((c.safety - 2.2e-2).abs() < 1e-3 && c.safe());
        let unsafe_cells: Vec<(f64, f64)> = rows.iter().flatten().filter(|c| !c.safe()).map(|c| (c.r, c.eps)).collect();
        assert_eq!(unsafe_cells, vec![(10.0, 1e-4)]);
    }

    #[test]
    fn csv_has_six_rows() {
        assert_eq!(to_csv(&table_degrees().unwrap()).lines().count(), 7);
    }
}
