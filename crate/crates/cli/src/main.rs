use clap::Parser;
use segpipe_cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SEGPIPE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(outcome) => {
            print!("{}", outcome.stdout);
            std::process::exit(outcome.status.code());
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.status.code());
        }
    }
}
