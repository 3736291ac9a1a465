//! Observation panels and covariate sets: CSV ingestion, validation,
//! standardization, seasonal harmonics, and monthly-to-daily interpolation.

use crate::error::{NhmmError, Result};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

/// Daily observations, T days by S stations, with a missingness mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPanel {
    /// Amounts in mm/day; entries under a false mask are placeholders.
    pub values: Array2<f64>,
    /// true = observed.
    pub mask: Array2<bool>,
    pub stations: Vec<String>,
}

impl ObservationPanel {
    pub fn new(values: Array2<f64>, mask: Array2<bool>, stations: Vec<String>) -> Result<Self> {
        let (t, s) = values.dim();
        if mask.dim() != (t, s) {
            return Err(NhmmError::Dimension(format!(
                "panel values {t}x{s} vs mask {:?}",
                mask.dim()
            )));
        }
        if stations.len() != s {
            return Err(NhmmError::Dimension(format!(
                "{} station names for {s} columns",
                stations.len()
            )));
        }
        if t < 2 || s < 1 {
            return Err(NhmmError::InvalidInput(format!(
                "panel must have T >= 2 and S >= 1, got {t}x{s}"
            )));
        }
        for ((i, j), &v) in values.indexed_iter() {
            if mask[(i, j)] && (!v.is_finite() || v < 0.0) {
                return Err(NhmmError::InvalidInput(format!(
                    "invalid observation {v} at day {}, station {}",
                    i + 1,
                    j + 1
                )));
            }
        }
        Ok(Self {
            values,
            mask,
            stations,
        })
    }

    pub fn n_days(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_stations(&self) -> usize {
        self.values.ncols()
    }

    /// Number of observed (non-missing) cells.
    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Parse a panel CSV: header row of station identifiers, one row per day,
    /// `NA` marking a missing cell.
    pub fn load_csv<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_path(path.as_ref())?;
        let stations: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let s = stations.len();
        let mut values = Vec::new();
        let mut mask = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != s {
                return Err(NhmmError::Parse {
                    row: i + 2,
                    col: 0,
                    msg: format!("ragged row: {} cells, expected {s}", rec.len()),
                });
            }
            for (j, cell) in rec.iter().enumerate() {
                let cell = cell.trim();
                if cell == "NA" {
                    values.push(0.0);
                    mask.push(false);
                } else {
                    let v: f64 = cell.parse().map_err(|_| NhmmError::Parse {
                        row: i + 2,
                        col: j + 1,
                        msg: format!("non-numeric token {cell:?}"),
                    })?;
                    if v < 0.0 {
                        return Err(NhmmError::Parse {
                            row: i + 2,
                            col: j + 1,
                            msg: format!("negative value {v}"),
                        });
                    }
                    values.push(v);
                    mask.push(true);
                }
            }
        }
        let t = values.len() / s;
        Self::new(
            Array2::from_shape_vec((t, s), values).expect("shape"),
            Array2::from_shape_vec((t, s), mask).expect("shape"),
            stations,
        )
    }

    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut f = std::fs::File::create(path.as_ref())?;
        writeln!(f, "{}", self.stations.join(","))?;
        for t in 0..self.n_days() {
            let row: Vec<String> = (0..self.n_stations())
                .map(|s| {
                    if self.mask[(t, s)] {
                        format!("{}", self.values[(t, s)])
                    } else {
                        "NA".to_string()
                    }
                })
                .collect();
            writeln!(f, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Shift/scale constants for one covariate column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnTransform {
    pub mean: f64,
    pub sd: f64,
}

impl ColumnTransform {
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }
}

/// Transition covariates x (T x B) and emission covariates w (T x S x A),
/// standardized at ingestion with the transforms retained for forecasting.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateSet {
    pub x: Array2<f64>,
    pub w: Array3<f64>,
    pub x_names: Vec<String>,
    pub w_names: Vec<String>,
    pub x_transforms: Vec<ColumnTransform>,
    pub w_transforms: Vec<ColumnTransform>,
}

impl CovariateSet {
    /// No covariates at all (B = 0, A = 0).
    pub fn empty(t: usize, s: usize) -> Self {
        Self {
            x: Array2::zeros((t, 0)),
            w: Array3::zeros((t, s, 0)),
            x_names: vec![],
            w_names: vec![],
            x_transforms: vec![],
            w_transforms: vec![],
        }
    }

    pub fn n_days(&self) -> usize {
        self.x.nrows()
    }

    pub fn b_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn a_dim(&self) -> usize {
        self.w.dim().2
    }

    /// Standardize raw covariates to zero mean and unit variance per column
    /// (w columns are pooled over days and stations). Constant columns are
    /// rejected.
    pub fn standardize(
        raw_x: Array2<f64>,
        raw_w: Array3<f64>,
        x_names: Vec<String>,
        w_names: Vec<String>,
    ) -> Result<Self> {
        check_finite_x(&raw_x)?;
        check_finite_w(&raw_w)?;
        let mut x = raw_x;
        let mut x_transforms = Vec::with_capacity(x.ncols());
        for b in 0..x.ncols() {
            let tr = column_transform(x.column(b).iter().cloned(), &x_names[b])?;
            x.column_mut(b).mapv_inplace(|v| tr.apply(v));
            x_transforms.push(tr);
        }
        let mut w = raw_w;
        let mut w_transforms = Vec::with_capacity(w.dim().2);
        for a in 0..w.dim().2 {
            let tr = column_transform(
                w.slice(ndarray::s![.., .., a]).iter().cloned(),
                &w_names[a],
            )?;
            w.slice_mut(ndarray::s![.., .., a]).mapv_inplace(|v| tr.apply(v));
            w_transforms.push(tr);
        }
        Ok(Self {
            x,
            w,
            x_names,
            w_names,
            x_transforms,
            w_transforms,
        })
    }

    /// Apply previously-fitted transforms to new (forecast) covariates.
    pub fn with_transforms(
        raw_x: Array2<f64>,
        raw_w: Array3<f64>,
        x_names: Vec<String>,
        w_names: Vec<String>,
        x_transforms: Vec<ColumnTransform>,
        w_transforms: Vec<ColumnTransform>,
    ) -> Result<Self> {
        check_finite_x(&raw_x)?;
        check_finite_w(&raw_w)?;
        if raw_x.ncols() != x_transforms.len() || raw_w.dim().2 != w_transforms.len() {
            return Err(NhmmError::Dimension(
                "covariate columns do not match stored transforms".into(),
            ));
        }
        let mut x = raw_x;
        for b in 0..x.ncols() {
            let tr = x_transforms[b];
            x.column_mut(b).mapv_inplace(|v| tr.apply(v));
        }
        let mut w = raw_w;
        for a in 0..w.dim().2 {
            let tr = w_transforms[a];
            w.slice_mut(ndarray::s![.., .., a]).mapv_inplace(|v| tr.apply(v));
        }
        Ok(Self {
            x,
            w,
            x_names,
            w_names,
            x_transforms,
            w_transforms,
        })
    }
}

fn check_finite_x(x: &Array2<f64>) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(NhmmError::InvalidInput("non-finite x covariate".into()));
    }
    Ok(())
}

fn check_finite_w(w: &Array3<f64>) -> Result<()> {
    if w.iter().any(|v| !v.is_finite()) {
        return Err(NhmmError::InvalidInput("non-finite w covariate".into()));
    }
    Ok(())
}

fn column_transform<I: Iterator<Item = f64>>(col: I, name: &str) -> Result<ColumnTransform> {
    let v: Vec<f64> = col.collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(NhmmError::InvalidInput(format!(
            "covariate column {name:?} is constant and cannot be standardized"
        )));
    }
    Ok(ColumnTransform {
        mean,
        sd: var.sqrt(),
    })
}

/// Linearly interpolate `monthly` block values to `t_days` daily values.
///
/// Value j (1-based) anchors at the center of block j, day
/// (j - 1/2) * t_days / m; days outside the first/last anchors take the
/// endpoint values.
pub fn interpolate_monthly(monthly: &[f64], t_days: usize) -> Result<Vec<f64>> {
    let m = monthly.len();
    if m == 0 || t_days == 0 {
        return Err(NhmmError::InvalidInput(
            "empty series in monthly interpolation".into(),
        ));
    }
    let block = t_days as f64 / m as f64;
    let anchor = |j: usize| (j as f64 + 0.5) * block; // 0-based block index
    let mut out = Vec::with_capacity(t_days);
    for d in 0..t_days {
        let day = d as f64 + 1.0;
        let v = if day <= anchor(0) {
            monthly[0]
        } else if day >= anchor(m - 1) {
            monthly[m - 1]
        } else {
            let j = ((day / block - 0.5).floor() as usize).min(m - 2);
            let frac = (day - anchor(j)) / block;
            monthly[j] + frac * (monthly[j + 1] - monthly[j])
        };
        out.push(v);
    }
    Ok(out)
}

/// Seasonal harmonic columns: sin/cos pairs at periods 365 and 182.5 days.
/// Returns a T x 4 matrix with names.
pub fn harmonic_columns(t_days: usize) -> (Array2<f64>, Vec<String>) {
    let mut h = Array2::zeros((t_days, 4));
    for t in 0..t_days {
        let ang = 2.0 * std::f64::consts::PI * t as f64 / 365.0;
        h[(t, 0)] = ang.sin();
        h[(t, 1)] = ang.cos();
        h[(t, 2)] = (2.0 * ang).sin();
        h[(t, 3)] = (2.0 * ang).cos();
    }
    let names = ["harm_sin365", "harm_cos365", "harm_sin182", "harm_cos182"]
        .map(String::from)
        .to_vec();
    (h, names)
}

/// Load the x covariate CSV: header of column names, one row per day.
/// A name suffixed `:monthly` marks a column holding M leading values
/// (remaining cells empty) to be interpolated to the panel length.
pub fn load_x_csv<P: AsRef<Path>>(path: P, t_days: usize) -> Result<(Array2<f64>, Vec<String>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path.as_ref())?;
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let b = headers.len();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); b];
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for j in 0..b {
            let cell = rec.get(j).unwrap_or("").trim();
            if cell.is_empty() {
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| NhmmError::Parse {
                row: i + 2,
                col: j + 1,
                msg: format!("non-numeric token {cell:?}"),
            })?;
            cols[j].push(v);
        }
    }
    let mut names = Vec::with_capacity(b);
    let mut x = Array2::zeros((t_days, b));
    for (j, header) in headers.iter().enumerate() {
        let (name, daily) = if let Some(base) = header.strip_suffix(":monthly") {
            (base.to_string(), interpolate_monthly(&cols[j], t_days)?)
        } else {
            if cols[j].len() != t_days {
                return Err(NhmmError::Dimension(format!(
                    "x column {header:?} has {} values for {t_days} days",
                    cols[j].len()
                )));
            }
            (header.clone(), cols[j].clone())
        };
        for (t, v) in daily.iter().enumerate() {
            x[(t, j)] = *v;
        }
        names.push(name);
    }
    Ok((x, names))
}

/// Load w covariates from one long-format CSV with columns
/// `day,station,name,value` (day 1-based, every (day, station, name) cell
/// present). Station identifiers must match the panel header.
pub fn load_w_long_csv<P: AsRef<Path>>(
    path: P,
    t_days: usize,
    stations: &[String],
) -> Result<(Array3<f64>, Vec<String>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())?;
    let station_idx: HashMap<&str, usize> = stations
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut names: Vec<String> = Vec::new();
    let mut name_idx: HashMap<String, usize> = HashMap::new();
    let mut cells: Vec<(usize, usize, usize, f64)> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse_err = |col: usize, msg: String| NhmmError::Parse {
            row: i + 2,
            col,
            msg,
        };
        let day: usize = rec
            .get(0)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| parse_err(1, "bad day index".into()))?;
        if day < 1 || day > t_days {
            return Err(parse_err(1, format!("day {day} outside 1..{t_days}")));
        }
        let station = rec.get(1).unwrap_or("").trim();
        let &s = station_idx
            .get(station)
            .ok_or_else(|| parse_err(2, format!("unknown station identifier {station:?}")))?;
        let name = rec.get(2).unwrap_or("").trim().to_string();
        let a = *name_idx.entry(name.clone()).or_insert_with(|| {
            names.push(name);
            names.len() - 1
        });
        let value: f64 = rec
            .get(3)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| parse_err(4, "non-numeric value".into()))?;
        cells.push((day - 1, s, a, value));
    }
    let a_dim = names.len();
    let expected = t_days * stations.len() * a_dim;
    if cells.len() != expected {
        return Err(NhmmError::Dimension(format!(
            "w file holds {} cells, expected {expected} (T x S x A)",
            cells.len()
        )));
    }
    let mut w = Array3::from_elem((t_days, stations.len(), a_dim), f64::NAN);
    for (t, s, a, v) in cells {
        w[(t, s, a)] = v;
    }
    if w.iter().any(|v| v.is_nan()) {
        return Err(NhmmError::InvalidInput(
            "w file is missing some (day, station, name) cells".into(),
        ));
    }
    Ok((w, names))
}

/// Load w covariates from a directory of per-station files `<station>.csv`,
/// each in the x-file layout (monthly flags allowed).
pub fn load_w_dir<P: AsRef<Path>>(
    dir: P,
    t_days: usize,
    stations: &[String],
) -> Result<(Array3<f64>, Vec<String>)> {
    let mut w: Option<Array3<f64>> = None;
    let mut names: Option<Vec<String>> = None;
    for (s, station) in stations.iter().enumerate() {
        let path = dir.as_ref().join(format!("{station}.csv"));
        if !path.exists() {
            return Err(NhmmError::InvalidInput(format!(
                "missing per-station covariate file {}",
                path.display()
            )));
        }
        let (xs, ns) = load_x_csv(&path, t_days)?;
        let arr = w.get_or_insert_with(|| Array3::zeros((t_days, stations.len(), ns.len())));
        if arr.dim().2 != ns.len() {
            return Err(NhmmError::Dimension(format!(
                "station {station} has {} covariate columns, expected {}",
                ns.len(),
                arr.dim().2
            )));
        }
        match &names {
            None => names = Some(ns),
            Some(prev) => {
                if *prev != ns {
                    return Err(NhmmError::InvalidInput(format!(
                        "station {station} covariate names differ from the first station"
                    )));
                }
            }
        }
        for t in 0..t_days {
            for a in 0..arr.dim().2 {
                arr[(t, s, a)] = xs[(t, a)];
            }
        }
    }
    Ok((
        w.unwrap_or_else(|| Array3::zeros((t_days, stations.len(), 0))),
        names.unwrap_or_default(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn panel_csv_roundtrip_with_na() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.csv");
        std::fs::write(&path, "st1,st2\n0.0,1.5\nNA,2.25\n").unwrap();
        let panel = ObservationPanel::load_csv(&path).unwrap();
        assert_eq!(panel.n_days(), 2);
        assert_eq!(panel.mask.iter().filter(|&&m| !m).count(), 1);
        assert!(!panel.mask[(1, 0)]);
        let out = dir.path().join("y2.csv");
        panel.write_csv(&out).unwrap();
        let reread = ObservationPanel::load_csv(&out).unwrap();
        assert_eq!(panel, reread);
    }

    #[test]
    fn panel_rejects_negative_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.csv");
        std::fs::write(&path, "a,b\n1.0,-1\n0,0\n").unwrap();
        let err = ObservationPanel::load_csv(&path).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
        std::fs::write(&path, "a,b\n1.0,x\n0,0\n").unwrap();
        assert!(ObservationPanel::load_csv(&path).is_err());
        std::fs::write(&path, "a,b\n1.0\n0,0\n").unwrap();
        assert!(ObservationPanel::load_csv(&path).is_err());
    }

    #[test]
    fn standardize_moments_and_constant_rejection() {
        let x = array![[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]];
        let err = CovariateSet::standardize(
            x.clone(),
            Array3::zeros((3, 1, 0)),
            vec!["a".into(), "b".into()],
            vec![],
        )
        .unwrap_err();
        assert!(err.to_string().contains('b'));

        let x = array![[1.0], [2.0], [3.0]];
        let cs =
            CovariateSet::standardize(x, Array3::zeros((3, 1, 0)), vec!["a".into()], vec![])
                .unwrap();
        let col: Vec<f64> = cs.x.column(0).to_vec();
        let (m, _) = crate::stats::mean_var(&col);
        assert!(m.abs() < 1e-10);
        let sd = (col.iter().map(|v| v * v).sum::<f64>() / col.len() as f64).sqrt();
        assert!((sd - 1.0).abs() < 1e-10);
    }

    #[test]
    fn monthly_interpolation_endpoints() {
        let monthly: Vec<f64> = (1..=12).map(|m| m as f64).collect();
        let daily = interpolate_monthly(&monthly, 365).unwrap();
        assert_eq!(daily.len(), 365);
        // Before the first anchor and after the last: endpoint values.
        assert_abs_diff_eq!(daily[0], 1.0);
        assert_abs_diff_eq!(daily[364], 12.0);
        // Hand-interpolated interior day: anchors at (j + 0.5) * 365/12.
        let block = 365.0 / 12.0;
        let day = 100.0f64;
        let j = (day / block - 0.5).floor();
        let frac = (day - (j + 0.5) * block) / block;
        let expect = monthly[j as usize] + frac * (monthly[j as usize + 1] - monthly[j as usize]);
        assert_abs_diff_eq!(daily[99], expect, epsilon = 1e-12);
        // Monotone input stays monotone.
        assert!(daily.windows(2).all(|p| p[1] >= p[0]));
    }

    #[test]
    fn x_csv_daily_and_monthly_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        let mut body = String::from("daily,idx:monthly\n");
        for t in 0..10 {
            if t < 2 {
                body.push_str(&format!("{},{}\n", t, (t + 1) * 10));
            } else {
                body.push_str(&format!("{},\n", t));
            }
        }
        std::fs::write(&path, body).unwrap();
        let (x, names) = load_x_csv(&path, 10).unwrap();
        assert_eq!(names, vec!["daily".to_string(), "idx".to_string()]);
        assert_abs_diff_eq!(x[(3, 0)], 3.0);
        // Monthly column: 2 anchors at days 2.5 and 7.5, values 10 and 20.
        assert_abs_diff_eq!(x[(0, 1)], 10.0);
        assert_abs_diff_eq!(x[(9, 1)], 20.0);
        assert_abs_diff_eq!(x[(4, 1)], 10.0 + 10.0 * (5.0 - 2.5) / 5.0, epsilon = 1e-12);
    }

    #[test]
    fn w_long_format_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        let mut body = String::from("day,station,name,value\n");
        for d in 1..=3 {
            for st in ["s1", "s2"] {
                body.push_str(&format!("{d},{st},enso,{}\n", d as f64 * 0.5));
            }
        }
        std::fs::write(&path, body).unwrap();
        let stations = vec!["s1".to_string(), "s2".to_string()];
        let (w, names) = load_w_long_csv(&path, 3, &stations).unwrap();
        assert_eq!(names, vec!["enso".to_string()]);
        assert_abs_diff_eq!(w[(2, 1, 0)], 1.5);
    }

    #[test]
    fn w_long_format_unknown_station() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        std::fs::write(&path, "day,station,name,value\n1,zz,enso,0.1\n").unwrap();
        let stations = vec!["s1".to_string()];
        assert!(load_w_long_csv(&path, 3, &stations).is_err());
    }

    #[test]
    fn harmonics_shape_and_period() {
        let (h, names) = harmonic_columns(365);
        assert_eq!(names.len(), 4);
        assert_abs_diff_eq!(h[(0, 0)], 0.0);
        assert_abs_diff_eq!(h[(0, 1)], 1.0);
        // Quarter period of the annual harmonic.
        assert_abs_diff_eq!(
            h[(91, 0)],
            (2.0 * std::f64::consts::PI * 91.0 / 365.0).sin()
        );
    }
}
