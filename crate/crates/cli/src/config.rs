//! `--config` support: keys from a `key=value` file become flags of the
//! chosen subcommand, placed before the user's own flags so the command line
//! wins.

use std::ffi::OsString;
use std::path::Path;

use elastireg_core::io::read_key_value_file;
use elastireg_core::Result;

const SUBCOMMANDS: [&str; 5] = ["phantom", "register", "train", "sweep", "evaluate"];

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(rest) = s.strip_prefix("--config=") {
            return Some(rest.into());
        }
    }
    None
}

/// Expand `--config FILE` into explicit flags. `true` turns a key into a
/// bare switch and `false` drops it.
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let kv = read_key_value_file(Path::new(&path))?;
    let Some(pos) = args
        .iter()
        .position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref()))
    else {
        return Ok(args);
    };
    let mut injected = Vec::new();
    for (k, v) in kv {
        let flag = format!("--{}", k.replace('_', "-"));
        match v.as_str() {
            "true" => injected.push(flag.into()),
            "false" => {}
            _ => {
                for part in v.split_whitespace() {
                    injected.push(OsString::from(&flag));
                    injected.push(part.into());
                }
            }
        }
    }
    let mut out = args[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}
