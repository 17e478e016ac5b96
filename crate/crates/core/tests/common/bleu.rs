//! Brute-force corpus BLEU, independent of the library implementation.

use rand::Rng;

/// Straightforward n-gram counting with explicit loops and linear scans.
pub struct Oracle {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub c_len: usize,
    pub r_len: usize,
}

fn occurrences(tokens: &[String], gram: &[String]) -> usize {
    let n = gram.len();
    if tokens.len() < n {
        return 0;
    }
    let mut count = 0;
    for start in 0..=tokens.len() - n {
        if (0..n).all(|k| tokens[start + k] == gram[k]) {
            count += 1;
        }
    }
    count
}

pub fn oracle(cands: &[String], refs: &[String]) -> Oracle {
    let mut o = Oracle {
        matches: [0; 4],
        totals: [0; 4],
        c_len: 0,
        r_len: 0,
    };
    for (c, r) in cands.iter().zip(refs) {
        let c: Vec<String> = c.split_whitespace().map(String::from).collect();
        let r: Vec<String> = r.split_whitespace().map(String::from).collect();
        o.c_len += c.len();
        o.r_len += r.len();
        for n in 1..=4 {
            if c.len() < n {
                continue;
            }
            let mut seen: Vec<Vec<String>> = Vec::new();
            for start in 0..=c.len() - n {
                let gram = c[start..start + n].to_vec();
                if seen.contains(&gram) {
                    continue;
                }
                let in_cand = occurrences(&c, &gram);
                let in_ref = occurrences(&r, &gram);
                o.matches[n - 1] += in_cand.min(in_ref);
                o.totals[n - 1] += in_cand;
                seen.push(gram);
            }
        }
    }
    o
}

pub fn oracle_bleu(o: &Oracle) -> f64 {
    if o.totals.contains(&0) || o.matches.contains(&0) {
        return 0.0;
    }
    let product: f64 = (0..4).map(|i| o.matches[i] as f64 / o.totals[i] as f64).product();
    let bp = if o.c_len >= o.r_len {
        1.0
    } else {
        (1.0 - o.r_len as f64 / o.c_len as f64).exp()
    };
    100.0 * bp * product.powf(0.25)
}

fn random_sentence(rng: &mut impl Rng, max_len: usize) -> String {
    let words = ["a", "b", "c", "d"];
    let len = rng.random_range(0..=max_len);
    (0..len).map(|_| words[rng.random_range(0..words.len())]).collect::<Vec<_>>().join(" ")
}

pub fn random_corpus(rng: &mut impl Rng) -> (Vec<String>, Vec<String>) {
    let n = rng.random_range(1..=6);
    let refs: Vec<String> = (0..n).map(|_| random_sentence(rng, 9)).collect();
    // Candidates are noisy copies so high-order matches actually occur.
    let cands = refs
        .iter()
        .map(|r| {
            if rng.random_bool(0.5) {
                let mut toks: Vec<&str> = r.split_whitespace().collect();
                if !toks.is_empty() && rng.random_bool(0.5) {
                    let i = rng.random_range(0..toks.len());
                    toks[i] = "d";
                }
                if rng.random_bool(0.3) {
                    toks.truncate(rng.random_range(0..=toks.len()));
                }
                toks.join(" ")
            } else {
                random_sentence(rng, 9)
            }
        })
        .collect();
    (cands, refs)
}
