fn main() {
    spatrob::cli::main()
}
