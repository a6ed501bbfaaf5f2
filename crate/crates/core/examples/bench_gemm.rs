use ndarray::Array2;
use std::time::Instant;

fn main() {
    // Fresh alloc + write per iteration (malloc/mmap churn)
    let t = Instant::now();
    for i in 0..20 {
        let mut a = Array2::<f64>::zeros((432, 4096));
        a[(i % 432, 0)] = 1.0;
        a.mapv_inplace(|v| v + 1.0);
        std::hint::black_box(&a);
    }
    println!("fresh zeros+write 14MB: {:?}", t.elapsed() / 20);

    // Reused buffer
    let mut a = Array2::<f64>::zeros((432, 4096));
    let t = Instant::now();
    for i in 0..20 {
        a[(i % 432, 0)] = 1.0;
        a.mapv_inplace(|v| v + 1.0);
        std::hint::black_box(&a);
    }
    println!("reused write 14MB:      {:?}", t.elapsed() / 20);
}
