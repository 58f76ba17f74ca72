//! Target file: the selected linear dynamics as `key=value` lines.

use std::fs;
use std::path::Path;

use bifdetect::sampling::fmt_f64;
use bifdetect::{Provenance, TargetLinearDynamics};
use nalgebra::DMatrix;

pub fn write(target: &TargetLinearDynamics, path: &Path) -> std::io::Result<()> {
    let a = target.a();
    let entries: Vec<String> = (0..a.nrows())
        .flat_map(|i| (0..a.ncols()).map(move |j| (i, j)))
        .map(|(i, j)| fmt_f64(a[(i, j)]))
        .collect();
    let text = format!(
        "provenance={}\ntau={}\nn={}\nA={}\n",
        target.provenance().as_str(),
        fmt_f64(target.tau()),
        a.nrows(),
        entries.join(",")
    );
    fs::write(path, text)
}

pub fn read(path: &Path) -> Result<TargetLinearDynamics, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("target {}: {e}", path.display()))?;
    let bad = |msg: String| format!("target {}: {msg}", path.display());
    let (mut prov, mut tau, mut n, mut entries) = (None, None, None, None);
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("malformed line {line:?}")))?;
        let v = v.trim();
        match k.trim() {
            "provenance" => {
                prov = Some(match v {
                    "model-aware" => Provenance::ModelAware,
                    "koopman" => Provenance::Koopman,
                    _ => return Err(bad(format!("unknown provenance {v:?}"))),
                })
            }
            "tau" => tau = Some(v.parse::<f64>().map_err(|_| bad(format!("bad tau {v:?}")))?),
            "n" => n = Some(v.parse::<usize>().map_err(|_| bad(format!("bad n {v:?}")))?),
            "A" => {
                let parsed: Result<Vec<f64>, _> = v.split(',').map(|s| s.trim().parse::<f64>()).collect();
                entries = Some(parsed.map_err(|_| bad(format!("bad matrix {v:?}")))?);
            }
            other => return Err(bad(format!("unknown key {other:?}"))),
        }
    }
    let (Some(prov), Some(tau), Some(n), Some(entries)) = (prov, tau, n, entries) else {
        return Err(bad("needs provenance, tau, n and A".into()));
    };
    if entries.len() != n * n {
        return Err(bad(format!("A has {} entries, expected {}", entries.len(), n * n)));
    }
    TargetLinearDynamics::new(DMatrix::from_row_slice(n, n, &entries), tau, prov).map_err(|e| bad(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("target.txt");
        let a = DMatrix::from_row_slice(2, 2, &[-3.5, 0.0, 0.0, -0.6]);
        let t = TargetLinearDynamics::new(a, 0.1, Provenance::Koopman).unwrap();
        write(&t, &path).unwrap();
        let back = read(&path).unwrap();
        assert_eq!(back.a(), t.a());
        assert_eq!(back.tau(), 0.1);
        assert_eq!(back.provenance(), Provenance::Koopman);
    }

    #[test]
    fn rejects_wrong_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("target.txt");
        fs::write(&path, "provenance=koopman\ntau=0.1\nn=2\nA=1,2,3\n").unwrap();
        assert!(read(&path).unwrap_err().contains("3 entries"));
    }
}
