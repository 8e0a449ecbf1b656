fn main() {
    let seed = std::env::var(muser::cli::SEED_ENV).ok();
    let code = muser::cli::run(
        std::env::args_os(),
        seed.as_deref(),
        &mut std::io::stdout().lock(),
        &mut std::io::stderr().lock(),
    );
    std::process::exit(code);
}
