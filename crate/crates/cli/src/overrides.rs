//! One command-line flag per configuration key.

use clap::{Arg, ArgMatches, Args, Command, FromArgMatches};

use crate::config::KEYS;

/// `--key value` pairs given on the command line, in key order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides(pub Vec<(String, String)>);

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

impl FromArgMatches for Overrides {
    fn from_arg_matches(matches: &ArgMatches) -> Result<Self, clap::Error> {
        Ok(Overrides(
            KEYS.iter()
                .filter_map(|&k| {
                    matches
                        .get_one::<String>(k)
                        .map(|v| (k.to_string(), v.clone()))
                })
                .collect(),
        ))
    }

    fn update_from_arg_matches(&mut self, matches: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(matches)?;
        Ok(())
    }
}

impl Args for Overrides {
    fn augment_args(cmd: Command) -> Command {
        KEYS.iter().fold(cmd, |cmd, &key| {
            cmd.arg(
                Arg::new(key)
                    .long(flag(key))
                    .value_name("VALUE")
                    .help_heading("Configuration")
                    .help(format!("Overrides `{key}` from the config file")),
            )
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}
