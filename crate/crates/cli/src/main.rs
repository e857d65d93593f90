use clap::Parser;
use gpfar_cli::{run, Cli};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    for path in run(&cli)? {
        println!("{}", path.display());
    }
    Ok(())
}
