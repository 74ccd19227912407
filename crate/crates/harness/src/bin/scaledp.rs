// Training allocates and frees large activation buffers every step; the
// system allocator returns them to the OS each time.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    let level = std::env::var("SCALEDP_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new().parse_filters(&level).format_timestamp(None).init();
    std::process::exit(scaledp_harness::cli::main_with(std::env::args_os()));
}
