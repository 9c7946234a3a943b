fn main() { std::process::exit(countfit::cli::main_with_args(std::env::args_os())); }
