use clap::Parser;

fn main() -> anyhow::Result<()> {
    pushnav_cli::run(pushnav_cli::Cli::parse())
}
