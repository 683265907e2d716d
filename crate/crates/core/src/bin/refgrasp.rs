fn main() {
    // CLI wired up once the trainer module lands.
}
