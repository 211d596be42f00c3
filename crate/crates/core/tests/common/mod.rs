use std::fs;
use std::path::PathBuf;

pub fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Reads a golden CSV, or writes `rows` to it when `NETMOR_BLESS` is set.
pub fn golden(name: &str, header: &str, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let path = golden_path(name);
    if std::env::var_os("NETMOR_BLESS").is_some() {
        let mut text = format!("{header}\n");
        for r in rows {
            let cells: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, text).unwrap();
    }
    let text = fs::read_to_string(&path).unwrap_or_else(|e| panic!("missing golden {}: {e}", path.display()));
    text.lines()
        .skip(1)
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect()
}
