//! Lifelong sequence orders: the two standard benchmark orders by name, or
//! an explicit comma-separated list. Each step carries the decay epoch the
//! schedule uses (later domains decay earlier than the first).

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceStep {
    pub dataset: String,
    pub decay_epoch: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceOrder {
    pub name: String,
    pub steps: Vec<SequenceStep>,
}

pub fn sequence_config(spec: &str, decay_first: u32, decay_rest: u32) -> Result<SequenceOrder> {
    let names: Vec<String> = match spec {
        "order1" => ["market1501", "dukemtmc", "cuhk-sysu", "msmt17"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        "order2" => ["viper", "market1501", "cuhk-sysu", "msmt17"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        other if other.starts_with("order") => {
            return Err(Error::UnknownOrder(other.to_string()))
        }
        list => list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.to_string())
            .collect(),
    };
    if names.is_empty() {
        return Err(Error::UnknownOrder(spec.to_string()));
    }
    for (i, a) in names.iter().enumerate() {
        if names[i + 1..].contains(a) {
            return Err(Error::InvalidConfig(format!(
                "dataset `{a}` appears twice in the order"
            )));
        }
    }
    let steps = names
        .into_iter()
        .enumerate()
        .map(|(i, dataset)| SequenceStep {
            dataset,
            decay_epoch: if i == 0 { decay_first } else { decay_rest },
        })
        .collect();
    Ok(SequenceOrder {
        name: spec.to_string(),
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_orders() {
        let o1 = sequence_config("order1", 30, 10).unwrap();
        assert_eq!(o1.steps.len(), 4);
        assert_eq!(o1.steps[0].dataset, "market1501");
        assert_eq!(o1.steps[0].decay_epoch, 30);
        assert_eq!(o1.steps[1].decay_epoch, 10);

        let o2 = sequence_config("order2", 30, 10).unwrap();
        assert_eq!(o2.steps[0].dataset, "viper");
    }

    #[test]
    fn explicit_list() {
        let order = sequence_config("synthA, synthB,synthC", 30, 10).unwrap();
        assert_eq!(
            order.steps.iter().map(|s| s.dataset.as_str()).collect::<Vec<_>>(),
            vec!["synthA", "synthB", "synthC"]
        );
    }

    #[test]
    fn unknown_named_order_rejected() {
        assert!(matches!(
            sequence_config("order3", 30, 10),
            Err(Error::UnknownOrder(_))
        ));
    }

    #[test]
    fn duplicates_rejected() {
        assert!(sequence_config("a,b,a", 30, 10).is_err());
    }
}
