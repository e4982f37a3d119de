//! Runner for the built-in modules.

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    std::process::exit(pipewright::prep::builtin::builtin_main(&args));
}
