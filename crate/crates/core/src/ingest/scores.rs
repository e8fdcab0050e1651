use crate::rubric::PoseCategory;

/// Continuous score interval of a category as `(start, end)`: green runs
/// from 1 down to 0, yellow from 0 to -1, red from -1 to -2.
pub fn category_score_range(category: PoseCategory) -> (f64, f64) {
    match category {
        PoseCategory::Green => (1.0, 0.0),
        PoseCategory::Yellow => (0.0, -1.0),
        PoseCategory::Red => (-1.0, -2.0),
    }
}

/// Center of a category's score interval.
pub fn category_midpoint(category: PoseCategory) -> f64 {
    let (hi, lo) = category_score_range(category);
    (hi + lo) / 2.0
}

/// Regression targets for a labeled frame sequence.
///
/// Each maximal run of one category is interpolated linearly from the
/// category's start value to its end value, endpoints inclusive. A run of a
/// single frame gets the midpoint.
pub fn assign_continuous_scores(categories: &[PoseCategory]) -> Vec<f64> {
    let mut scores = Vec::with_capacity(categories.len());
    let mut start = 0;
    while start < categories.len() {
        let cat = categories[start];
        let end = categories[start..]
            .iter()
            .position(|&c| c != cat)
            .map_or(categories.len(), |p| start + p);
        let n = end - start;
        let (hi, lo) = category_score_range(cat);
        debug_assert_eq!(hi - lo, 1.0);
        if n == 1 {
            scores.push((hi + lo) / 2.0);
        } else {
            // Every range has unit width, so the score is `hi - i / (n - 1)`.
            scores.extend((0..n).map(|i| hi - i as f64 / (n - 1) as f64));
        }
        start = end;
    }
    scores
}

#[cfg(test)]
mod tests {
    use super::*;
    use PoseCategory::*;

    #[test]
    fn examples() {
        assert_eq!(assign_continuous_scores(&[Green, Green, Green]), vec![1.0, 0.5, 0.0]);
        assert_eq!(assign_continuous_scores(&[Yellow]), vec![-0.5]);
        assert_eq!(
            assign_continuous_scores(&[Green, Green, Yellow, Yellow, Red, Red]),
            vec![1.0, 0.0, 0.0, -1.0, -1.0, -2.0]
        );
        assert!(assign_continuous_scores(&[]).is_empty());
    }

    #[test]
    fn runs_are_monotone_and_in_range() {
        let seq = [Green, Green, Green, Green, Yellow, Red, Red, Red, Green, Yellow, Yellow];
        let s = assign_continuous_scores(&seq);
        for (i, (&c, &v)) in seq.iter().zip(&s).enumerate() {
            let (hi, lo) = category_score_range(c);
            assert!(v <= hi && v >= lo, "frame {i}: {v}");
            if i > 0 && seq[i - 1] == c {
                assert!(v <= s[i - 1]);
            }
        }
    }
}
