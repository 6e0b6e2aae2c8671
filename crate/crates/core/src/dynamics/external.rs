//! Step oracle backed by a child process.
//!
//! The process receives one line per step containing the space-separated
//! entries of `x` followed by those of `w`, and must answer with one line
//! holding the next state.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use super::StepOracle;
use crate::error::{Error, Result};

struct Session {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl Drop for Session {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// The child is spawned lazily and reused; calls are serialized through a lock.
pub struct ProcessOracle {
    command: String,
    args: Vec<String>,
    session: Mutex<Option<Session>>,
}

impl ProcessOracle {
    pub fn new(command: String, args: Vec<String>) -> Self {
        Self {
            command,
            args,
            session: Mutex::new(None),
        }
    }

    fn spawn(&self) -> Result<Session> {
        let mut child = Command::new(&self.command)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::OracleCall(format!("cannot start `{}`: {e}", self.command)))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Session {
            child,
            stdin,
            stdout,
        })
    }
}

pub(crate) fn format_request(x: &[f64], w: &[f64]) -> String {
    let mut line = x
        .iter()
        .chain(w)
        .map(|v| format!("{v:e}"))
        .collect::<Vec<_>>()
        .join(" ");
    line.push('\n');
    line
}

pub(crate) fn parse_reply(line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|e| Error::OracleCall(format!("bad number `{tok}` in reply: {e}")))
        })
        .collect()
}

impl StepOracle for ProcessOracle {
    fn step(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        let mut guard = self
            .session
            .lock()
            .map_err(|_| Error::OracleCall("oracle lock poisoned".into()))?;
        if guard.is_none() {
            *guard = Some(self.spawn()?);
        }
        let session = guard.as_mut().expect("session just created");
        let exchange = |s: &mut Session| -> std::io::Result<String> {
            s.stdin.write_all(format_request(x, w).as_bytes())?;
            s.stdin.flush()?;
            let mut reply = String::new();
            s.stdout.read_line(&mut reply)?;
            Ok(reply)
        };
        match exchange(session) {
            Ok(reply) if !reply.is_empty() => parse_reply(&reply),
            Ok(_) => {
                *guard = None;
                Err(Error::OracleCall(format!("`{}` closed its output", self.command)))
            }
            Err(e) => {
                *guard = None;
                Err(Error::OracleCall(format!("`{}`: {e}", self.command)))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_and_reply_formats() {
        assert_eq!(format_request(&[1.0, -0.5], &[2.0]), "1e0 -5e-1 2e0\n");
        assert_eq!(parse_reply("0.7 -1e-1\n").unwrap(), vec![0.7, -0.1]);
        assert!(parse_reply("0.7 abc").is_err());
    }

    #[cfg(unix)]
    #[test]
    fn shell_process_acts_as_oracle() {
        let oracle = ProcessOracle::new(
            "sh".into(),
            vec!["-c".into(), "while read a b; do echo \"$b $a\"; done".into()],
        );
        assert_eq!(oracle.step(&[2.0, 3.5], &[]).unwrap(), vec![3.5, 2.0]);
        assert_eq!(oracle.step(&[-4.0], &[1.0]).unwrap(), vec![1.0, -4.0]);
    }

    #[test]
    fn missing_program_reports_oracle_error() {
        let oracle = ProcessOracle::new("/nonexistent/oracle-binary".into(), vec![]);
        assert!(matches!(oracle.step(&[1.0], &[]), Err(Error::OracleCall(_))));
    }
}
