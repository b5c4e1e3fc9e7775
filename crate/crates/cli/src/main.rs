use clap::Parser;

fn main() -> anyhow::Result<()> {
    let cli = scp2_cli::Cli::parse();
    let env_out = std::env::var(scp2_core::harness::OUTPUT_ENV).ok();
    scp2_cli::execute(cli, env_out)
}
