fn main() {
    // under construction
}
