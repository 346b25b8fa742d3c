//! The learned distillation process: one row of pathway weights per step.
//!
//! Rows hold normalized weights (what the train loss consumes) alongside the
//! raw weights they came from (used for clipping). On disk a schedule is two
//! CSV files, `name.csv` with normalized rows and `name.raw.csv` with raw
//! rows, both headed `step,<pathway-id>,...`.

use std::collections::hash_map::DefaultHasher;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pathways::parse_pathway_id;

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pathway_ids: Vec<String>,
    normalized: Vec<Vec<f64>>,
    raw: Vec<Vec<f64>>,
}

fn check_ids(ids: &[String]) -> Result<()> {
    for (i, id) in ids.iter().enumerate() {
        if parse_pathway_id(id).is_none() {
            return Err(Error::Contract(format!("bad pathway id {id:?}")));
        }
        if ids[..i].contains(id) {
            return Err(Error::Contract(format!("duplicate pathway id {id:?}")));
        }
    }
    Ok(())
}

impl Schedule {
    pub fn empty(pathway_ids: Vec<String>) -> Result<Self> {
        check_ids(&pathway_ids)?;
        Ok(Schedule {
            pathway_ids,
            normalized: Vec::new(),
            raw: Vec::new(),
        })
    }

    pub fn new(pathway_ids: Vec<String>, normalized: Vec<Vec<f64>>, raw: Vec<Vec<f64>>) -> Result<Self> {
        if normalized.len() != raw.len() {
            return Err(Error::Contract(format!(
                "{} normalized rows but {} raw rows",
                normalized.len(),
                raw.len()
            )));
        }
        let mut s = Schedule::empty(pathway_ids)?;
        for (n, r) in normalized.into_iter().zip(raw) {
            s.push(n, r)?;
        }
        Ok(s)
    }

    /// `len` identical rows. Raw values are `raw` for every pathway, which
    /// is only relevant when clipping is on.
    pub fn constant(pathway_ids: Vec<String>, weight: f64, raw: f64, len: usize) -> Result<Self> {
        let p = pathway_ids.len();
        Schedule::new(pathway_ids, vec![vec![weight; p]; len], vec![vec![raw; p]; len])
    }

    pub fn push(&mut self, normalized: Vec<f64>, raw: Vec<f64>) -> Result<()> {
        let p = self.pathway_ids.len();
        if normalized.len() != p || raw.len() != p {
            return Err(Error::Contract(format!(
                "row has {}/{} entries for {p} pathways",
                normalized.len(),
                raw.len()
            )));
        }
        if normalized.iter().chain(&raw).any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite schedule row {}", self.len())));
        }
        self.normalized.push(normalized);
        self.raw.push(raw);
        Ok(())
    }

    pub fn pathway_ids(&self) -> &[String] {
        &self.pathway_ids
    }

    pub fn len(&self) -> usize {
        self.normalized.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normalized.is_empty()
    }

    pub fn num_pathways(&self) -> usize {
        self.pathway_ids.len()
    }

    pub fn normalized(&self) -> &[Vec<f64>] {
        &self.normalized
    }

    pub fn raw(&self) -> &[Vec<f64>] {
        &self.raw
    }

    pub fn row(&self, t: usize) -> Option<(&[f64], &[f64])> {
        Some((self.normalized.get(t)?, self.raw.get(t)?))
    }

    /// Normalized trajectory of one pathway.
    pub fn column(&self, p: usize) -> Vec<f64> {
        self.normalized.iter().map(|r| r[p]).collect()
    }

    /// Stretches the schedule to `len` rows by piecewise-linear
    /// interpolation over a common `[0, 1]` time axis. Rows landing exactly
    /// on a source row are copied, so the endpoints (and the whole schedule
    /// when `len == self.len()`) are reproduced bit for bit. A single row is
    /// repeated.
    pub fn interpolate(&self, len: usize) -> Result<Schedule> {
        let s = self.len();
        if s == 0 {
            return Err(Error::Contract("cannot interpolate an empty schedule".into()));
        }
        if len < s {
            return Err(Error::Contract(format!("target length {len} is shorter than the schedule ({s} rows)")));
        }
        let stretch = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            if s == 1 {
                return vec![rows[0].clone(); len];
            }
            let den = len - 1;
            (0..len)
                .map(|t| {
                    let num = t * (s - 1);
                    let (lo, rem) = (num / den, num % den);
                    if rem == 0 {
                        return rows[lo].clone();
                    }
                    let frac = rem as f64 / den as f64;
                    rows[lo]
                        .iter()
                        .zip(&rows[lo + 1])
                        .map(|(&a, &b)| (a + (b - a) * frac).clamp(a.min(b), a.max(b)))
                        .collect()
                })
                .collect()
        };
        Ok(Schedule {
            pathway_ids: self.pathway_ids.clone(),
            normalized: stretch(&self.normalized),
            raw: stretch(&self.raw),
        })
    }

    /// Reorders columns to follow `ids`, which must be a permutation of the
    /// schedule's ids.
    pub fn remap(&self, ids: &[String]) -> Result<Schedule> {
        if ids.len() != self.pathway_ids.len() {
            return Err(Error::Config(format!(
                "schedule has {} pathways, expected {}",
                self.pathway_ids.len(),
                ids.len()
            )));
        }
        let order = ids
            .iter()
            .map(|id| {
                self.pathway_ids
                    .iter()
                    .position(|x| x == id)
                    .ok_or_else(|| Error::Config(format!("schedule has no pathway {id:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let pick = |rows: &[Vec<f64>]| rows.iter().map(|r| order.iter().map(|&i| r[i]).collect()).collect();
        Ok(Schedule {
            pathway_ids: ids.to_vec(),
            normalized: pick(&self.normalized),
            raw: pick(&self.raw),
        })
    }

    /// Hash of ids and the exact bits of every value.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.pathway_ids.hash(&mut h);
        for row in self.normalized.iter().chain(&self.raw) {
            for v in row {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Path of the raw-weight sibling of `path`.
    pub fn raw_path(path: &Path) -> PathBuf {
        let s = path.to_string_lossy();
        let stem = s.strip_suffix(".csv").unwrap_or(&s);
        PathBuf::from(format!("{stem}.raw.csv"))
    }

    fn encode(&self, rows: &[Vec<f64>]) -> String {
        let mut out = String::from("step");
        for id in &self.pathway_ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for (t, row) in rows.iter().enumerate() {
            write!(out, "{t}").unwrap();
            for v in row {
                write!(out, ",{v:?}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        self.encode(&self.normalized)
    }

    pub fn raw_to_csv(&self) -> String {
        self.encode(&self.raw)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))?;
        let raw = Self::raw_path(path);
        std::fs::write(&raw, self.raw_to_csv()).map_err(|e| Error::io(&raw, e))
    }

    /// Loads a schedule with columns in file order.
    pub fn load(path: &Path) -> Result<Schedule> {
        let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
        let raw_path = Self::raw_path(path);
        Self::from_csv(
            &read(path)?,
            &read(&raw_path)?,
            &path.display().to_string(),
            &raw_path.display().to_string(),
        )
    }

    /// Loads a schedule and reorders its columns to `ids`.
    pub fn load_for(path: &Path, ids: &[String]) -> Result<Schedule> {
        Self::load(path)?.remap(ids)
    }

    pub fn from_csv(normalized: &str, raw: &str, origin: &str, raw_origin: &str) -> Result<Schedule> {
        let (ids, norm_rows) = parse_csv(normalized, origin)?;
        let (raw_ids, raw_rows) = parse_csv(raw, raw_origin)?;
        if raw_ids != ids {
            return Err(Error::format(raw_origin, Some(1), "pathway columns differ from the normalized file"));
        }
        if raw_rows.len() != norm_rows.len() {
            return Err(Error::format(
                raw_origin,
                None,
                format!("{} rows, normalized file has {}", raw_rows.len(), norm_rows.len()),
            ));
        }
        Ok(Schedule {
            pathway_ids: ids,
            normalized: norm_rows,
            raw: raw_rows,
        })
    }

    /// Per-pathway statistics of the normalized weights as an aligned text
    /// table.
    pub fn summary_table(&self) -> String {
        let width = self.pathway_ids.iter().map(String::len).max().unwrap_or(0).max(7);
        let mut out = format!(
            "{:<width$}  {:>10}  {:>10}  {:>10}  {:>10}  {:>10}\n",
            "pathway", "first", "last", "min", "max", "mean"
        );
        for (p, id) in self.pathway_ids.iter().enumerate() {
            let col = self.column(p);
            if col.is_empty() {
                writeln!(out, "{id:<width$}  (no rows)").unwrap();
                continue;
            }
            let min = col.iter().copied().fold(f64::INFINITY, f64::min);
            let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            writeln!(
                out,
                "{id:<width$}  {:>10.6}  {:>10.6}  {min:>10.6}  {max:>10.6}  {mean:>10.6}",
                col[0],
                col[col.len() - 1]
            )
            .unwrap();
        }
        out
    }

    /// Long-format heat-map data, `teacher_tap,pathway,step,alpha`, sorted
    /// by teacher tap, then pathway, then step.
    pub fn heatmap_csv(&self) -> String {
        let mut order: Vec<(usize, usize)> = self
            .pathway_ids
            .iter()
            .enumerate()
            .map(|(p, id)| (parse_pathway_id(id).map(|(t, _, _)| t).unwrap_or(usize::MAX), p))
            .collect();
        order.sort();
        let mut out = String::from("teacher_tap,pathway,step,alpha\n");
        for (tap, p) in order {
            for (t, row) in self.normalized.iter().enumerate() {
                writeln!(out, "{tap},{},{t},{:?}", self.pathway_ids[p], row[p]).unwrap();
            }
        }
        out
    }
}

fn parse_csv(text: &str, origin: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    if text.is_empty() {
        return Err(Error::format(origin, Some(1), "empty file"));
    }
    if !text.ends_with('\n') {
        let last = text.lines().count();
        return Err(Error::format(origin, Some(last), "missing final newline (truncated file?)"));
    }
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().expect("non-empty");
    let mut cols = header.split(',');
    if cols.next() != Some("step") {
        return Err(Error::format(origin, Some(1), "header must start with \"step\""));
    }
    let ids: Vec<String> = cols.map(str::to_string).collect();
    for (i, id) in ids.iter().enumerate() {
        if parse_pathway_id(id).is_none() {
            return Err(Error::format(origin, Some(1), format!("bad pathway id {id:?}")));
        }
        if ids[..i].contains(id) {
            return Err(Error::format(origin, Some(1), format!("duplicate pathway id {id:?}")));
        }
    }
    let mut rows = Vec::new();
    for (line, text) in lines {
        let mut fields = text.split(',');
        let step = fields.next().unwrap_or("");
        if step.parse::<usize>().ok() != Some(rows.len()) {
            return Err(Error::format(origin, Some(line), format!("expected step {}, found {step:?}", rows.len())));
        }
        let row = fields
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::format(origin, Some(line), format!("bad value {f:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != ids.len() {
            return Err(Error::format(
                origin,
                Some(line),
                format!("{} values for {} pathways", row.len(), ids.len()),
            ));
        }
        rows.push(row);
    }
    Ok((ids, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|k| format!("t0-s0-k{k}")).collect()
    }

    fn single(values: &[f64]) -> Schedule {
        let rows: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
        Schedule::new(ids(1), rows.clone(), rows).unwrap()
    }

    #[test]
    fn interpolates_two_rows() {
        let s = single(&[1.0, 3.0]).interpolate(4).unwrap();
        let got = s.column(0);
        let want = [1.0, 5.0 / 3.0, 7.0 / 3.0, 3.0];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-15, "{got:?}");
        }
        assert_eq!(got[0], 1.0);
        assert_eq!(got[3], 3.0);
    }

    #[test]
    fn interpolation_edge_cases() {
        let s = single(&[0.3, 0.1, 0.7]);
        assert_eq!(s.interpolate(3).unwrap(), s);
        assert!(matches!(s.interpolate(2), Err(Error::Contract(_))));
        assert!(matches!(single(&[]).interpolate(5), Err(Error::Contract(_))));
        let one = single(&[0.25]).interpolate(6).unwrap();
        assert_eq!(one.column(0), vec![0.25; 6]);
    }

    #[test]
    fn push_checks_width() {
        let mut s = Schedule::empty(ids(2)).unwrap();
        assert!(s.push(vec![0.1], vec![0.1, 0.2]).is_err());
        assert!(s.push(vec![0.1, f64::NAN], vec![0.1, 0.2]).is_err());
        s.push(vec![0.1, 0.2], vec![1.0, 2.0]).unwrap();
        assert_eq!(s.len(), 1);
        assert!(Schedule::empty(vec!["nope".into()]).is_err());
        assert!(Schedule::empty(vec!["t0-s0-k0".into(), "t0-s0-k0".into()]).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let s = Schedule::new(
            ids(2),
            vec![vec![0.1, 1.0 / 3.0], vec![1e-300, 0.123456789012345678]],
            vec![vec![1.0, -2.5], vec![f64::MIN_POSITIVE, 7.0]],
        )
        .unwrap();
        let back = Schedule::from_csv(&s.to_csv(), &s.raw_to_csv(), "n", "r").unwrap();
        assert_eq!(back, s);
        assert_eq!(back.fingerprint(), s.fingerprint());
    }

    #[test]
    fn csv_errors_name_lines() {
        let s = single(&[0.5, 0.25]);
        let good = s.to_csv();
        let raw = s.raw_to_csv();
        let truncated = &good[..good.len() - 3];
        match Schedule::from_csv(truncated, &raw, "n", "r") {
            Err(Error::Format { line: Some(3), .. }) => {}
            other => panic!("{other:?}"),
        }
        let bad_value = good.replace("0.25", "x");
        assert!(matches!(
            Schedule::from_csv(&bad_value, &raw, "n", "r"),
            Err(Error::Format { line: Some(3), .. })
        ));
        let bad_header = good.replace("t0-s0-k0", "pathway");
        assert!(matches!(
            Schedule::from_csv(&bad_header, &raw, "n", "r"),
            Err(Error::Format { line: Some(1), .. })
        ));
        let bad_step = good.replace("\n1,", "\n7,");
        assert!(matches!(
            Schedule::from_csv(&bad_step, &raw, "n", "r"),
            Err(Error::Format { line: Some(3), .. })
        ));
    }

    #[test]
    fn remap_reorders_columns() {
        let s = Schedule::new(ids(3), vec![vec![0.1, 0.2, 0.3]], vec![vec![1.0, 2.0, 3.0]]).unwrap();
        let rev: Vec<String> = ids(3).into_iter().rev().collect();
        let r = s.remap(&rev).unwrap();
        assert_eq!(r.normalized()[0], vec![0.3, 0.2, 0.1]);
        assert_eq!(r.remap(&ids(3)).unwrap(), s);
        assert!(matches!(s.remap(&ids(2)), Err(Error::Config(_))));
    }

    #[test]
    fn raw_path_sibling() {
        assert_eq!(Schedule::raw_path(Path::new("a/s.csv")), PathBuf::from("a/s.raw.csv"));
        assert_eq!(Schedule::raw_path(Path::new("s")), PathBuf::from("s.raw.csv"));
    }

    #[test]
    fn heatmap_groups_by_teacher_tap() {
        let ids = vec!["t1-s0-k0".to_string(), "t0-s0-k0".to_string()];
        let s = Schedule::new(ids, vec![vec![0.1, 0.2]], vec![vec![1.0, 1.0]]).unwrap();
        let csv = s.heatmap_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[1], "0,t0-s0-k0,0,0.2");
        assert_eq!(lines[2], "1,t1-s0-k0,0,0.1");
        assert!(s.summary_table().contains("t1-s0-k0"));
    }
}
