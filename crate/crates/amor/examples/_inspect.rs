use amor::tasks::{gen_simple_retrieval, TaskConfig};

fn main() {
    let cfg = TaskConfig::simple_retrieval();
    for seed in [1u64, 2, 3] {
        let s = gen_simple_retrieval(&cfg, seed).unwrap();
        let text: Vec<String> = s.tokens.iter().enumerate().map(|(i, &t)| {
            let tok = match t {
                8 => "M".to_string(),
                9 => "R".to_string(),
                10 => "P".to_string(),
                x => x.to_string(),
            };
            if s.needs_retrieval[i] { format!("[{tok}]") } else { tok }
        }).collect();
        println!("seed {seed}: {}", text.join(" "));
    }
    // Oracle ceiling: predict target from (prev, cur) bigram statistics
    // computed over a large corpus, per sequence-pair context.
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut retr_correct = 0usize;
    let mut retr_total = 0usize;
    for seed in 0..500u64 {
        let s = gen_simple_retrieval(&cfg, seed).unwrap();
        // per-sequence: most frequent follower of each token
        let mut follow = vec![[0usize; 11]; 11];
        for w in s.tokens.windows(2) {
            follow[w[0]][w[1]] += 1;
        }
        for t in 0..s.tokens.len() - 1 {
            let cur = s.tokens[t];
            let pred = (0..11).max_by_key(|&c| follow[cur][c]).unwrap();
            if pred == s.targets[t] { correct += 1; }
            total += 1;
            if s.needs_retrieval[t] {
                if pred == s.targets[t] { retr_correct += 1; }
                retr_total += 1;
            }
        }
    }
    println!("bigram-oracle overall acc: {:.4}  retrieval acc: {:.4}",
        correct as f64 / total as f64, retr_correct as f64 / retr_total as f64);
}
