use std::path::Path;
use std::process::Command;

use log::warn;

/// Environment variable holding the PESQ command template.
pub const PESQ_ENV: &str = "LGTSE_PESQ_CMD";

/// External PESQ evaluator.
///
/// The template is split on whitespace; `{reference}` and `{estimate}`
/// tokens are replaced by file paths. The score is parsed from the last
/// non-empty line of standard output.
#[derive(Clone, Debug, PartialEq)]
pub struct PesqHook {
    argv: Vec<String>,
}

impl PesqHook {
    pub fn from_template(template: &str) -> Option<Self> {
        let argv: Vec<String> = template.split_whitespace().map(str::to_owned).collect();
        if argv.is_empty() {
            None
        } else {
            Some(Self { argv })
        }
    }

    pub fn from_env() -> Option<Self> {
        std::env::var(PESQ_ENV)
            .ok()
            .and_then(|t| Self::from_template(&t))
    }

    pub fn score(&self, estimate: &Path, reference: &Path) -> Option<f64> {
        let args: Vec<String> = self.argv[1..]
            .iter()
            .map(|a| {
                a.replace("{reference}", &reference.to_string_lossy())
                    .replace("{estimate}", &estimate.to_string_lossy())
            })
            .collect();
        let output = match Command::new(&self.argv[0]).args(&args).output() {
            Ok(o) => o,
            Err(e) => {
                warn!("PESQ hook {} failed to start: {e}", self.argv[0]);
                return None;
            }
        };
        if !output.status.success() {
            warn!("PESQ hook exited with {}", output.status);
            return None;
        }
        let stdout = String::from_utf8_lossy(&output.stdout);
        let last = stdout.lines().rev().find(|l| !l.trim().is_empty())?;
        match last.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => Some(v),
            _ => {
                warn!("PESQ hook printed unparseable score {last:?}");
                None
            }
        }
    }
}

/// PESQ score through the optional hook; `None` when unconfigured or failed.
pub fn pesq_external(hook: Option<&PesqHook>, estimate: &Path, reference: &Path) -> Option<f64> {
    hook.and_then(|h| h.score(estimate, reference))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use std::os::unix::fs::PermissionsExt;

    fn script(dir: &Path, name: &str, body: &str) -> String {
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "#!/bin/sh\n{body}").unwrap();
        drop(f);
        std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
        path.to_string_lossy().into_owned()
    }

    #[test]
    fn unconfigured_is_absent() {
        assert_eq!(pesq_external(None, Path::new("a"), Path::new("b")), None);
        assert!(PesqHook::from_template("   ").is_none());
    }

    #[test]
    fn parses_last_line() {
        let dir = tempfile::tempdir().unwrap();
        let cmd = script(dir.path(), "ok.sh", "echo loading\necho 2.14");
        let hook = PesqHook::from_template(&format!("{cmd} {{reference}} {{estimate}}")).unwrap();
        assert_eq!(hook.score(Path::new("e.wav"), Path::new("r.wav")), Some(2.14));
    }

    #[test]
    fn passes_paths_in_template_order() {
        let dir = tempfile::tempdir().unwrap();
        let cmd = script(dir.path(), "args.sh", "[ \"$1\" = r.wav ] && [ \"$2\" = e.wav ] && echo 3.5");
        let hook = PesqHook::from_template(&format!("{cmd} {{reference}} {{estimate}}")).unwrap();
        assert_eq!(hook.score(Path::new("e.wav"), Path::new("r.wav")), Some(3.5));
    }

    #[test]
    fn nonzero_exit_is_absent() {
        let dir = tempfile::tempdir().unwrap();
        let cmd = script(dir.path(), "bad.sh", "echo 2.0\nexit 3");
        let hook = PesqHook::from_template(&cmd).unwrap();
        assert_eq!(pesq_external(Some(&hook), Path::new("e"), Path::new("r")), None);
        let missing = PesqHook::from_template("/nonexistent/pesq-tool").unwrap();
        assert_eq!(missing.score(Path::new("e"), Path::new("r")), None);
    }
}
