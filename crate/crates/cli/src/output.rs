use std::fs;
use std::path::Path;

use serde::Serialize;
use steerscope::plot::{render_svg, PlotSpec};
use steerscope::store::sorted_json;
use steerscope::Result;

/// One JSON line on stderr describing a failure.
pub fn diagnostic(kind: &str, message: &str, exit_code: i32) {
    let line = serde_json::json!({ "error": kind, "message": message, "exit_code": exit_code });
    eprintln!("{line}");
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(sorted_json(value)? + "\n"))
}

pub fn write_svg(path: &Path, spec: &PlotSpec) -> Result<()> {
    fs::write(path, render_svg(spec)?)?;
    Ok(())
}
