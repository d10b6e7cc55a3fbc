use clap::Parser;

fn main() -> anyhow::Result<()> {
    auxctc::cli::run(auxctc::cli::Cli::parse())
}
