use clap::Parser;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = contextgpt_cli::Cli::parse();
    let stdout = std::io::stdout();
    contextgpt_cli::run(cli, &mut stdout.lock())
}
