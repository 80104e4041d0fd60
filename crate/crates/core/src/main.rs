// SPDX-License-Identifier: MIT OR Apache-2.0

fn main() {
    std::process::exit(unpack::cli::run(std::env::args().skip(1)));
}
