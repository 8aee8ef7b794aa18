use std::io;

fn main() {
    hemocnn::init_thread_pool();
    let code = hemocnn::cli::run(std::env::args_os(), &mut io::stdout().lock(), &mut io::stderr().lock());
    std::process::exit(code);
}
