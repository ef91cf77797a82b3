fn main() {
    println!("mmgen");
}
