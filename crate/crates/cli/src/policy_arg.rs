//! Policy selection from the command line: `scripted:<file>`,
//! `synth:<policy.json>` or `endpoint:<config.toml>`.

use std::collections::HashMap;
use std::path::Path;

use focusloop_core::grpo::TabularPolicy;
use focusloop_core::policy::{Policy, ScriptBook, ScriptedPolicy};
use focusloop_core::synthenv::agent::SynthAgent;
use focusloop_core::synthenv::SynthEnv;
use focusloop_vlm::{as_policy, EndpointConfig, PromptTemplate, DEFAULT_TEMPLATE};
use serde::Deserialize;

use crate::CliError;

/// Script file: either a list of turns used for every image, or an object
/// with per-image scripts and an optional default.
#[derive(Deserialize)]
#[serde(untagged)]
enum ScriptFile {
    Single(Vec<String>),
    Book {
        #[serde(default)]
        default: Option<Vec<String>>,
        #[serde(default)]
        by_image: HashMap<String, Vec<String>>,
    },
}

pub struct PolicyOptions {
    pub greedy: bool,
    pub template: Option<String>,
}

fn script(turns: Vec<String>) -> Result<ScriptedPolicy, CliError> {
    ScriptedPolicy::new(turns).map_err(|e| CliError::Policy(e.to_string()))
}

pub fn load_policy(arg: &str, opts: &PolicyOptions) -> Result<Box<dyn Policy>, CliError> {
    let (kind, path) = arg
        .split_once(':')
        .ok_or_else(|| CliError::Usage(format!("policy `{arg}` must look like kind:path")))?;
    let path = Path::new(path);
    match kind {
        "scripted" => {
            let file: ScriptFile = crate::read_json(path)?;
            Ok(match file {
                ScriptFile::Single(turns) => Box::new(script(turns)?),
                ScriptFile::Book { default, by_image } => {
                    let by_image = by_image
                        .into_iter()
                        .map(|(k, v)| Ok((k, script(v)?)))
                        .collect::<Result<HashMap<_, _>, CliError>>()?;
                    let fallback = default.map(script).transpose()?;
                    Box::new(ScriptBook::new(by_image, fallback))
                }
            })
        }
        "synth" => {
            let policy: TabularPolicy = crate::read_json(path)?;
            let env = SynthEnv::default();
            if policy.n_states() != env.n_states() || policy.n_actions() != env.n_actions() {
                return Err(CliError::Policy(format!(
                    "{}: policy has {}x{} entries, the synthetic environment needs {}x{}",
                    path.display(),
                    policy.n_states(),
                    policy.n_actions(),
                    env.n_states(),
                    env.n_actions()
                )));
            }
            Ok(Box::new(SynthAgent::new(env, policy).greedy(opts.greedy)))
        }
        "endpoint" => {
            let text = crate::read_text(path)?;
            let config = EndpointConfig::from_toml_str(&text)
                .map_err(|e| CliError::Policy(e.to_string()))?
                .with_env_key();
            let template = match &opts.template {
                Some(p) => crate::read_text(Path::new(p))?,
                None => DEFAULT_TEMPLATE.to_string(),
            };
            let template = PromptTemplate::new(template).map_err(|e| CliError::Policy(e.to_string()))?;
            Ok(Box::new(as_policy(config, template).map_err(|e| CliError::Policy(e.to_string()))?))
        }
        other => Err(CliError::Usage(format!(
            "unknown policy kind `{other}` (expected scripted, synth or endpoint)"
        ))),
    }
}
