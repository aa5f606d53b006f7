fn main() {
    std::process::exit(mfgprice::cli::run(std::env::args_os()));
}
