use std::io::{self, Write};
use std::process::ExitCode;

use clap::Parser;
use diagsim_cli::{run, stdin_lines, usage_exit_code, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(usage_exit_code(&e) as u8);
        }
    };
    let mut stdout = io::stdout().lock();
    let code = run(cli, &mut stdin_lines(), &mut stdout, &mut io::stderr());
    let _ = stdout.flush();
    ExitCode::from(code as u8)
}
