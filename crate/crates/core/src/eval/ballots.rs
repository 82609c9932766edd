//! Listening-test ballots: AB preference, best-worst scaling and MOS.

use std::io::Read;

use serde::Deserialize;

use super::report::{mean_ci, proportion_ci, EvalReport};
use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BallotKind {
    Ab,
    Bws,
    Mos,
}

impl std::str::FromStr for BallotKind {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ab" => Ok(Self::Ab),
            "bws" => Ok(Self::Bws),
            "mos" => Ok(Self::Mos),
            _ => Err(EvalError::Invalid(format!("unknown ballot kind `{s}` (expected ab, bws or mos)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbChoice {
    A,
    B,
    NoPreference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbBallot {
    pub listener: String,
    pub item: String,
    pub choice: AbChoice,
}

/// `best` or `worst` may be absent when a ballot only asked for one of them.
#[derive(Debug, Clone, PartialEq)]
pub struct BwsBallot {
    pub listener: String,
    pub items: Vec<String>,
    pub best: Option<String>,
    pub worst: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MosBallot {
    pub listener: String,
    pub item: String,
    pub rating: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BallotSet {
    Ab(Vec<AbBallot>),
    Bws(Vec<BwsBallot>),
    Mos(Vec<MosBallot>),
}

#[derive(Deserialize)]
struct AbRow {
    listener: String,
    item: String,
    choice: String,
}

#[derive(Deserialize)]
struct BwsRow {
    listener: String,
    itemset: String,
    best: Option<String>,
    worst: Option<String>,
}

#[derive(Deserialize)]
struct MosRow {
    listener: String,
    item: String,
    rating: String,
}

fn rows<T: for<'de> Deserialize<'de>, R: Read>(reader: R) -> Result<Vec<T>, EvalError> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| EvalError::Schema {
                record: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn nonempty(s: Option<String>) -> Option<String> {
    s.filter(|s| !s.is_empty())
}

impl BallotSet {
    pub fn kind(&self) -> BallotKind {
        match self {
            Self::Ab(_) => BallotKind::Ab,
            Self::Bws(_) => BallotKind::Bws,
            Self::Mos(_) => BallotKind::Mos,
        }
    }

    /// Reads CSV with the header `listener,item,choice` (AB),
    /// `listener,itemset,best,worst` (BWS, items separated by `;`) or
    /// `listener,item,rating` (MOS).
    pub fn from_csv<R: Read>(kind: BallotKind, reader: R) -> Result<Self, EvalError> {
        let schema = |record: usize, message: String| EvalError::Schema { record, message };
        Ok(match kind {
            BallotKind::Ab => Self::Ab(
                rows::<AbRow, _>(reader)?
                    .into_iter()
                    .enumerate()
                    .map(|(i, r)| {
                        let choice = match r.choice.to_ascii_uppercase().as_str() {
                            "A" => AbChoice::A,
                            "B" => AbChoice::B,
                            "NP" => AbChoice::NoPreference,
                            other => return Err(schema(i + 1, format!("choice `{other}` is not A, B or NP"))),
                        };
                        Ok(AbBallot {
                            listener: r.listener,
                            item: r.item,
                            choice,
                        })
                    })
                    .collect::<Result<_, EvalError>>()?,
            ),
            BallotKind::Bws => Self::Bws(
                rows::<BwsRow, _>(reader)?
                    .into_iter()
                    .map(|r| BwsBallot {
                        listener: r.listener,
                        items: r.itemset.split(';').map(|s| s.trim().to_string()).collect(),
                        best: nonempty(r.best),
                        worst: nonempty(r.worst),
                    })
                    .collect(),
            ),
            BallotKind::Mos => Self::Mos(
                rows::<MosRow, _>(reader)?
                    .into_iter()
                    .enumerate()
                    .map(|(i, r)| {
                        let rating = r
                            .rating
                            .parse::<u8>()
                            .ok()
                            .filter(|x| (1..=5).contains(x))
                            .ok_or_else(|| schema(i + 1, format!("rating `{}` is not an integer in 1..=5", r.rating)))?;
                        Ok(MosBallot {
                            listener: r.listener,
                            item: r.item,
                            rating,
                        })
                    })
                    .collect::<Result<_, EvalError>>()?,
            ),
        })
    }
}

fn wrong_kind(expected: &str) -> EvalError {
    EvalError::Invalid(format!("expected {expected} ballots"))
}

/// Percentage choosing A, B and no preference, each with a
/// normal-approximation 95% interval.
pub fn ab_aggregate(ballots: &BallotSet) -> Result<EvalReport, EvalError> {
    let BallotSet::Ab(b) = ballots else {
        return Err(wrong_kind("AB"));
    };
    if b.is_empty() {
        return Err(EvalError::NoData("empty AB ballot set".into()));
    }
    let mut report = EvalReport::new("ab_preference_percent");
    for (x, (label, choice)) in [("A", AbChoice::A), ("B", AbChoice::B), ("NP", AbChoice::NoPreference)]
        .into_iter()
        .enumerate()
    {
        let count = b.iter().filter(|v| v.choice == choice).count();
        let (p, half) = proportion_ci(count, b.len());
        report.push(label, x as f64, 100.0 * p, 100.0 * half, b.len());
    }
    Ok(report)
}

/// Per item, the percentage of ballots naming it best (`best:<item>`) and
/// worst (`worst:<item>`). Each percentage is over the ballots that asked for
/// that choice, so the two denominators may differ.
pub fn bws_aggregate(ballots: &BallotSet) -> Result<EvalReport, EvalError> {
    let BallotSet::Bws(b) = ballots else {
        return Err(wrong_kind("BWS"));
    };
    let first = b.first().ok_or_else(|| EvalError::NoData("empty BWS ballot set".into()))?;
    let items = first.items.clone();
    let mut sorted = items.clone();
    sorted.sort();
    for (i, v) in b.iter().enumerate() {
        let schema = |message: String| EvalError::Schema { record: i + 1, message };
        let mut these = v.items.clone();
        these.sort();
        if these != sorted {
            return Err(schema(format!("item set {:?} differs from {:?}", v.items, items)));
        }
        for pick in [&v.best, &v.worst].into_iter().flatten() {
            if !items.contains(pick) {
                return Err(schema(format!("unknown item `{pick}`")));
            }
        }
        if v.best.is_some() && v.best == v.worst {
            return Err(schema("best and worst are the same item".into()));
        }
    }
    let n_best = b.iter().filter(|v| v.best.is_some()).count();
    let n_worst = b.iter().filter(|v| v.worst.is_some()).count();
    let mut report = EvalReport::new("bws_percent");
    for (x, item) in items.iter().enumerate() {
        for (kind, n, get) in [
            ("best", n_best, &(|v: &BwsBallot| v.best.clone()) as &dyn Fn(&BwsBallot) -> Option<String>),
            ("worst", n_worst, &|v: &BwsBallot| v.worst.clone()),
        ] {
            if n == 0 {
                continue;
            }
            let count = b.iter().filter(|v| get(v).as_deref() == Some(item.as_str())).count();
            let (p, half) = proportion_ci(count, n);
            report.push(format!("{kind}:{item}"), x as f64, 100.0 * p, 100.0 * half, n);
        }
    }
    Ok(report)
}

/// Mean opinion score per item with a `1.96·s/√n` interval. Items appear in
/// first-seen order.
pub fn mos_aggregate(ballots: &BallotSet) -> Result<EvalReport, EvalError> {
    let BallotSet::Mos(b) = ballots else {
        return Err(wrong_kind("MOS"));
    };
    if b.is_empty() {
        return Err(EvalError::NoData("empty MOS ballot set".into()));
    }
    let mut items: Vec<&str> = Vec::new();
    for v in b {
        if !items.contains(&v.item.as_str()) {
            items.push(&v.item);
        }
    }
    let mut report = EvalReport::new("mos");
    for (x, item) in items.iter().enumerate() {
        let ratings: Vec<f64> = b.iter().filter(|v| v.item == *item).map(|v| v.rating as f64).collect();
        let (mean, half) = mean_ci(&ratings);
        report.push(*item, x as f64, mean, half, ratings.len());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_each_kind() {
        let ab = BallotSet::from_csv(BallotKind::Ab, "listener,item,choice\nl1,x,A\nl2,x,np\n".as_bytes()).unwrap();
        assert_eq!(ab.kind(), BallotKind::Ab);
        let bws = BallotSet::from_csv(BallotKind::Bws, "listener,itemset,best,worst\nl1,a;b;c,a,\n".as_bytes()).unwrap();
        let BallotSet::Bws(v) = &bws else { unreachable!() };
        assert_eq!(v[0].items, vec!["a", "b", "c"]);
        assert_eq!(v[0].worst, None);
        assert!(BallotSet::from_csv(BallotKind::Mos, "listener,item,rating\nl1,x,6\n".as_bytes()).is_err());
        assert!(BallotSet::from_csv(BallotKind::Ab, "listener,item,choice\nl1,x,C\n".as_bytes()).is_err());
        assert!(BallotSet::from_csv(BallotKind::Ab, "listener,item\nl1,x\n".as_bytes()).is_err());
    }

    #[test]
    fn bws_rejects_unknown_and_equal_picks() {
        let unknown = BallotSet::from_csv(BallotKind::Bws, "listener,itemset,best,worst\nl1,a;b,c,a\n".as_bytes()).unwrap();
        assert!(matches!(bws_aggregate(&unknown), Err(EvalError::Schema { record: 1, .. })));
        let same = BallotSet::from_csv(BallotKind::Bws, "listener,itemset,best,worst\nl1,a;b,a,a\n".as_bytes()).unwrap();
        assert!(bws_aggregate(&same).is_err());
    }

    #[test]
    fn never_chosen_is_zero() {
        let b = BallotSet::from_csv(BallotKind::Bws, "listener,itemset,best,worst\nl1,a;b;c,a,b\nl2,a;b;c,a,b\n".as_bytes()).unwrap();
        let r = bws_aggregate(&b).unwrap();
        assert_eq!(r.row("best:c").unwrap().mean, 0.0);
        assert_eq!(r.row("worst:c").unwrap().mean, 0.0);
    }

    #[test]
    fn mos_single_value_has_zero_width() {
        let b = BallotSet::from_csv(BallotKind::Mos, "listener,item,rating\nl1,x,4\nl2,x,4\n".as_bytes()).unwrap();
        assert_eq!(mos_aggregate(&b).unwrap().rows[0].formatted(), "4.00±0.00");
        assert!(matches!(mos_aggregate(&BallotSet::Mos(vec![])), Err(EvalError::NoData(_))));
        assert!(ab_aggregate(&b).is_err());
    }
}
