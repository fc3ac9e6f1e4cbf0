fn main() -> anyhow::Result<()> {
    splitlab_cli::run(std::env::args_os())
}
