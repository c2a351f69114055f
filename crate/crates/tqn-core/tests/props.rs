//! Property tests: the edit distance is a metric matching its recursive
//! definition, schema CSV serialisation is a fixed point, class scoring is
//! monotone in attribute probabilities, and softmax rows are exact
//! distributions even for extreme logits.

use proptest::prelude::*;

use tqn_core::factorization::{bundled, edit_distance, FactorizationSchema};
use tqn_core::tensor::{Tape, Tensor};

/// Textbook three-way recursion, exponential on purpose: the oracle for the
/// dynamic-programming implementation.
fn recursive_distance(a: &[u32], b: &[u32]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, rest_a)), Some((y, rest_b))) => {
            let substitute = recursive_distance(rest_a, rest_b) + usize::from(x != y);
            let delete = recursive_distance(rest_a, b) + 1;
            let insert = recursive_distance(a, rest_b) + 1;
            substitute.min(delete).min(insert)
        }
    }
}

fn token_seq() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0u32..4, 0..7)
}

proptest! {
    #[test]
    fn edit_distance_matches_the_recursive_definition(a in token_seq(), b in token_seq()) {
        prop_assert_eq!(edit_distance(&a, &b), recursive_distance(&a, &b));
    }

    #[test]
    fn edit_distance_is_a_metric(a in token_seq(), b in token_seq(), c in token_seq()) {
        prop_assert_eq!(edit_distance(&a, &a), 0);
        prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        if a != b {
            prop_assert!(edit_distance(&a, &b) > 0);
        }
    }
}

/// Builds a dense full-product schema over `arities` real attributes per
/// query (each query also admits the null answer).
fn product_schema_csv(real_counts: &[usize]) -> (String, String) {
    let mut queries = String::from("q_id,q_name,att_id,att_name\n-,-,0,null\n");
    let mut next_id = 1u32;
    let mut options: Vec<Vec<u32>> = Vec::new();
    for (q, &n) in real_counts.iter().enumerate() {
        let mut ids = vec![0u32];
        for a in 0..n {
            queries.push_str(&format!("{q},query{q},{next_id},q{q}a{a}\n"));
            ids.push(next_id);
            next_id += 1;
        }
        options.push(ids);
    }
    let mut classes = String::from("class_index,class_name");
    for q in 0..real_counts.len() {
        classes.push_str(&format!(",att_q{q}"));
    }
    classes.push('\n');
    let mut tuples = vec![Vec::new()];
    for ids in &options {
        tuples = tuples
            .into_iter()
            .flat_map(|t: Vec<u32>| {
                ids.iter().map(move |&id| {
                    let mut next = t.clone();
                    next.push(id);
                    next
                })
            })
            .collect();
    }
    // Drop the all-null tuple: a class must assert at least one attribute.
    tuples.retain(|t| t.iter().any(|&id| id != 0));
    for (i, tuple) in tuples.iter().enumerate() {
        classes.push_str(&format!("{i},class_{i}"));
        for id in tuple {
            classes.push_str(&format!(",{id}"));
        }
        classes.push('\n');
    }
    (queries, classes)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schema_csv_serialisation_is_a_fixed_point(
        real_counts in prop::collection::vec(1usize..=2, 1..=3)
    ) {
        let (q_csv, c_csv) = product_schema_csv(&real_counts);
        let schema = FactorizationSchema::parse(&q_csv, &c_csv).unwrap();
        let (q_out, c_out) = schema.to_csv_strings();
        let reparsed = FactorizationSchema::parse(&q_out, &c_out).unwrap();
        prop_assert_eq!((q_out, c_out), reparsed.to_csv_strings());
        prop_assert_eq!(schema.class_count(), reparsed.class_count());
        for i in 0..schema.class_count() {
            prop_assert_eq!(
                schema.category_to_attributes(i).unwrap(),
                reparsed.category_to_attributes(i).unwrap()
            );
            prop_assert_eq!(schema.class_name(i).unwrap(), reparsed.class_name(i).unwrap());
        }
    }

    #[test]
    fn class_score_is_monotone_in_its_own_attribute_probabilities(
        raw in prop::collection::vec(0.0f64..=1.0, 11),
        class_index in 0usize..27,
        query in 0usize..3,
        bump in 0.0f64..=1.0,
    ) {
        let schema = bundled::synthetic().unwrap();
        let arities = schema.arities();
        prop_assume!(arities.iter().sum::<usize>() == raw.len());
        let mut per_query: Vec<Vec<f64>> = Vec::new();
        let mut offset = 0;
        for &n in &arities {
            per_query.push(raw[offset..offset + n].to_vec());
            offset += n;
        }
        let before = schema.class_prob_from_attributes(&per_query).unwrap()[class_index];

        let tuple = schema.category_to_attributes(class_index).unwrap().to_vec();
        let local = schema.queries()[query].local_index(tuple[query]).unwrap();
        let old = per_query[query][local];
        per_query[query][local] = (old + bump * (1.0 - old)).min(1.0);
        let after = schema.class_prob_from_attributes(&per_query).unwrap()[class_index];
        prop_assert!(
            after >= before - 1e-15,
            "raising p(attribute of class {}) lowered its score: {} -> {}",
            class_index, before, after
        );
    }

    #[test]
    fn softmax_rows_sum_to_one_even_for_extreme_logits(
        rows in 1usize..4,
        cols in 1usize..6,
        scale in 1.0f64..60.0,
        raw in prop::collection::vec(-1.0f64..=1.0, 1..24),
    ) {
        prop_assume!(raw.len() >= rows * cols);
        let data: Vec<f64> = raw[..rows * cols].iter().map(|v| v * scale).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![rows, cols], data).unwrap());
        let p = tape.softmax_rows(x).unwrap();
        let probs = tape.value(p);
        for r in 0..rows {
            let row = probs.row(r);
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row {} sums to {}", r, sum);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
