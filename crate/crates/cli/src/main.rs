fn main() {
    println!("segguidednet");
}
