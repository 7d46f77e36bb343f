fn main() {
    println!("e2stn");
}
