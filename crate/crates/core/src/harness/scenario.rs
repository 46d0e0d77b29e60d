//! Named request sequences run from the normal world.

use std::fmt::Write as _;

use crate::root_task::{BAD_HANDLE, IGNORED, TA_ERROR, TA_FAULTED};
use crate::security_services::crypto::sha256;
use crate::security_services::seal::SealedBlob;

use super::{Platform, PlatformError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expect {
    Word(u32),
    /// Result word and exact output bytes.
    Output(u32, Vec<u8>),
    /// Result word only; output is checked for presence.
    AnyOutput(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub command_id: u32,
    pub args: u32,
    pub payload: Option<Vec<u8>>,
    pub expect: Expect,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub name: &'static str,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioResult {
    pub lines: Vec<String>,
    pub passed: bool,
}

pub const SCENARIOS: [&str; 5] = ["increment", "unknown", "wraparound", "crypto", "seal"];

fn word(command_id: u32, args: u32, expect: u32) -> Step {
    Step {
        command_id,
        args,
        payload: None,
        expect: Expect::Word(expect),
    }
}

pub fn builtin(name: &str) -> Option<Scenario> {
    let steps = match name {
        "increment" => vec![word(3, 0, 1)],
        "unknown" => vec![word(99, 0, IGNORED)],
        "wraparound" => vec![word(3, 41, 42), word(3, 0xFFFF_FFFF, 0)],
        "crypto" => vec![Step {
            command_id: 1,
            args: 0,
            payload: Some(b"abc".to_vec()),
            expect: Expect::Output(32, sha256(b"abc").to_vec()),
        }],
        "seal" => vec![Step {
            command_id: 2,
            args: 0,
            payload: Some(b"abc".to_vec()),
            expect: Expect::AnyOutput(SealedBlob::sealed_len(32) as u32),
        }],
        _ => return None,
    };
    let name = SCENARIOS.into_iter().find(|n| *n == name)?;
    Some(Scenario { name, steps })
}

pub fn format_word(w: u32) -> String {
    match w {
        IGNORED => "IGNORED".into(),
        TA_FAULTED => "TA_FAULTED".into(),
        TA_ERROR => "TA_ERROR".into(),
        BAD_HANDLE => "BAD_HANDLE".into(),
        w => w.to_string(),
    }
}

fn format_arg(step: &Step) -> String {
    match &step.payload {
        Some(p) => match std::str::from_utf8(p) {
            Ok(s) if s.chars().all(|c| c.is_ascii_graphic()) => format!("\"{s}\""),
            _ => format!("<{} bytes>", p.len()),
        },
        None => step.args.to_string(),
    }
}

pub fn run(platform: &mut Platform, scenario: &Scenario) -> Result<ScenarioResult, PlatformError> {
    let mut lines = Vec::new();
    let mut passed = true;
    for step in &scenario.steps {
        let (w, out) = platform.smc_invoke(step.command_id, step.args, step.payload.as_deref())?;
        let mut line = format!("{} {} -> {}", step.command_id, format_arg(step), format_word(w));
        let ok = match &step.expect {
            Expect::Word(e) => w == *e,
            Expect::Output(e, bytes) => {
                if let Some(o) = &out {
                    let _ = write!(line, " {}", hex::encode(o));
                }
                w == *e && out.as_ref() == Some(bytes)
            }
            Expect::AnyOutput(e) => w == *e && out.is_some_and(|o| o.len() == *e as usize),
        };
        if !ok {
            line.push_str(" (unexpected)");
            passed = false;
        }
        lines.push(line);
    }
    Ok(ScenarioResult { lines, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_builtins_exist() {
        for n in SCENARIOS {
            assert_eq!(builtin(n).unwrap().name, n);
        }
        assert!(builtin("nope").is_none());
    }
}
