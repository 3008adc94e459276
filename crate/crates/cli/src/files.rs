//! Line files: `id<TAB>space-separated integers`, one utterance per line.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CliError, CliResult};

pub type Lines = Vec<(String, Vec<usize>)>;

pub fn render(lines: &[(String, Vec<usize>)]) -> String {
    let mut out = String::new();
    for (id, seq) in lines {
        let body: Vec<String> = seq.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "{id}\t{}", body.join(" "));
    }
    out
}

pub fn read(path: &Path) -> CliResult<Lines> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse(&text).map_err(|(line, msg)| CliError {
        code: crate::error::EXIT_IO,
        kind: "io",
        msg: format!("{}:{line}: {msg}", path.display()),
    })
}

fn parse(text: &str) -> Result<Lines, (usize, String)> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, body) = line.split_once('\t').unwrap_or((line, ""));
        let seq = body
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| (i + 1, format!("`{t}`: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        out.push((id.trim().to_string(), seq));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_empty_sequences() {
        let lines = vec![("a".to_string(), vec![1, 2, 30]), ("b".to_string(), vec![])];
        assert_eq!(parse(&render(&lines)).unwrap(), lines);
        assert!(parse("x\t1 y").is_err());
    }
}
