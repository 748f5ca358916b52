fn main() {
    println!("alignsim");
}
