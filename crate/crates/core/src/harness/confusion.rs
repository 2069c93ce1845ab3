use super::EvalResult;
use crate::error::{Error, Result};

const CORNER: &str = "true\\predicted";

#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionReport {
    pub full: String,
    /// Rows and columns restricted to the requested classes, counts unchanged.
    pub subset: Option<String>,
}

/// Square confusion matrix as CSV with class-name headers.
pub fn confusion_csv(matrix: &[Vec<u64>], names: &[String]) -> Result<String> {
    if matrix.len() != names.len() || matrix.iter().any(|r| r.len() != names.len()) {
        return Err(Error::validation(format!(
            "confusion matrix does not match {} class names",
            names.len()
        )));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let write_err = |e: csv::Error| Error::format("confusion csv", e.to_string());
    w.write_record(std::iter::once(CORNER).chain(names.iter().map(String::as_str)))
        .map_err(write_err)?;
    for (name, row) in names.iter().zip(matrix) {
        let cells = std::iter::once(name.clone()).chain(row.iter().map(u64::to_string));
        w.write_record(cells).map_err(write_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format("confusion csv", e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
}

pub fn parse_confusion_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<u64>>)> {
    let bad = |m: String| Error::format("confusion csv", m);
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut records = r.records();
    let header = records
        .next()
        .ok_or_else(|| bad("empty file".into()))?
        .map_err(|e| bad(e.to_string()))?;
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut matrix = Vec::with_capacity(names.len());
    for (i, rec) in records.enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.get(0) != names.get(i).map(String::as_str) {
            return Err(bad(format!("row {} is not labelled {:?}", i + 1, names.get(i))));
        }
        let row = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<u64>().map_err(|_| bad(format!("bad count {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        matrix.push(row);
    }
    if matrix.len() != names.len() {
        return Err(bad(format!("{} rows for {} classes", matrix.len(), names.len())));
    }
    Ok((names, matrix))
}

/// Full confusion CSV plus an optional named-class subset.
pub fn confusion_report(result: &EvalResult, names: &[String], subset: Option<&[String]>) -> Result<ConfusionReport> {
    let full = confusion_csv(&result.confusion, names)?;
    let subset = match subset {
        None => None,
        Some(wanted) => {
            let idx = wanted
                .iter()
                .map(|w| {
                    names
                        .iter()
                        .position(|n| n == w)
                        .ok_or_else(|| Error::validation(format!("unknown class {w:?} in confusion subset")))
                })
                .collect::<Result<Vec<_>>>()?;
            let sub: Vec<Vec<u64>> = idx
                .iter()
                .map(|&i| idx.iter().map(|&j| result.confusion[i][j]).collect())
                .collect();
            Some(confusion_csv(&sub, wanted)?)
        }
    };
    Ok(ConfusionReport { full, subset })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn round_trip_and_subset() {
        let r = EvalResult::from_confusion(vec![vec![5, 1, 0], vec![2, 3, 1], vec![0, 0, 4]]);
        let n = names(&["note, quarter", "rest", "clef"]);
        let rep = confusion_report(&r, &n, Some(&names(&["clef", "note, quarter"]))).unwrap();
        let (pn, pm) = parse_confusion_csv(&rep.full).unwrap();
        assert_eq!(pn, n);
        assert_eq!(pm, r.confusion);
        let (sn, sm) = parse_confusion_csv(rep.subset.as_ref().unwrap()).unwrap();
        assert_eq!(sn, names(&["clef", "note, quarter"]));
        assert_eq!(sm, vec![vec![4, 0], vec![0, 5]]);
    }

    #[test]
    fn unknown_subset_class_is_rejected() {
        let r = EvalResult::from_confusion(vec![vec![1]]);
        let err = confusion_report(&r, &names(&["a"]), Some(&names(&["b"]))).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }
}
