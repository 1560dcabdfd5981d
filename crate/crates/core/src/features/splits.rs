//! Walk-forward split layout: weeks of five trading days, one week of
//! validation, five of training, one of testing, advancing a week at a
//! time.

/// Trading days per week.
pub const WEEK_DAYS: usize = 5;

/// Number of weeks one window spans (valid + train + test).
pub const WINDOW_WEEKS: usize = 7;

/// Day-index sets for one walk-forward window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub ordinal: usize,
    pub valid_week: Vec<usize>,
    pub train_weeks: [Vec<usize>; WINDOW_WEEKS - 2],
    pub test_week: Vec<usize>,
}

impl DatasetSplit {
    /// Training day indices, flattened in chronological order.
    pub fn train_days(&self) -> Vec<usize> {
        self.train_weeks.iter().flatten().copied().collect()
    }

    pub fn all_days(&self) -> Vec<usize> {
        let mut days = self.valid_week.clone();
        days.extend(self.train_days());
        days.extend(self.test_week.iter().copied());
        days
    }
}

/// Group `day_count` days into full weeks (a trailing partial week is
/// dropped) and emit every 7-week window. Fewer than 7 full weeks
/// yields no splits.
pub fn rolling_splits(day_count: usize) -> Vec<DatasetSplit> {
    let weeks = day_count / WEEK_DAYS;
    if weeks < WINDOW_WEEKS {
        return Vec::new();
    }
    let week_days =
        |w: usize| -> Vec<usize> { (w * WEEK_DAYS..(w + 1) * WEEK_DAYS).collect() };
    (0..=weeks - WINDOW_WEEKS)
        .map(|w| DatasetSplit {
            ordinal: w,
            valid_week: week_days(w),
            train_weeks: std::array::from_fn(|i| week_days(w + 1 + i)),
            test_week: week_days(w + WINDOW_WEEKS - 1),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_weeks_give_eleven_windows() {
        assert_eq!(rolling_splits(17 * WEEK_DAYS).len(), 11);
    }

    #[test]
    fn seven_weeks_give_one_window() {
        let splits = rolling_splits(35);
        assert_eq!(splits.len(), 1);
        let s = &splits[0];
        assert_eq!(s.valid_week, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.train_weeks[0], vec![5, 6, 7, 8, 9]);
        assert_eq!(s.test_week, vec![30, 31, 32, 33, 34]);
    }

    #[test]
    fn below_seven_weeks_is_empty() {
        assert_eq!(rolling_splits(34).len(), 0);
        assert_eq!(rolling_splits(0).len(), 0);
    }

    #[test]
    fn trailing_partial_week_is_dropped() {
        // 38 days = 7 full weeks + 3 leftover days
        let splits = rolling_splits(38);
        assert_eq!(splits.len(), 1);
        assert!(splits[0].all_days().iter().all(|&d| d < 35));
    }

    #[test]
    fn windows_are_disjoint_and_ordered() {
        for split in rolling_splits(12 * WEEK_DAYS) {
            let days = split.all_days();
            // strictly increasing day order implies disjoint weeks and
            // valid < train < test chronologically
            assert!(days.windows(2).all(|w| w[0] < w[1]), "{days:?}");
            assert_eq!(days.len(), WINDOW_WEEKS * WEEK_DAYS);
            assert_eq!(split.valid_week.len(), WEEK_DAYS);
            assert_eq!(split.test_week.len(), WEEK_DAYS);
        }
    }

    #[test]
    fn consecutive_windows_advance_one_week() {
        let splits = rolling_splits(9 * WEEK_DAYS);
        assert_eq!(splits.len(), 3);
        assert_eq!(splits[1].valid_week[0], WEEK_DAYS);
        assert_eq!(splits[2].valid_week[0], 2 * WEEK_DAYS);
    }
}
