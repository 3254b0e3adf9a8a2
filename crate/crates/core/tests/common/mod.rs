#![allow(dead_code)]

use std::collections::BTreeMap;

/// Coverage loss written out directly from the pseudocode, over plain arrays.
///
/// `outputs[layer][sample][neuron]` are neuron values. min/max are taken per
/// sample; a neuron's scaled value is its batch mean.
pub fn algorithm1(outputs: &[Vec<Vec<f64>>], neuron_act_map: &mut [Vec<bool>], t: f64) -> f64 {
    let mut neu_cov_loss = 0.0;
    for (i, layer) in outputs.iter().enumerate() {
        let mut inactive_neurons: BTreeMap<usize, f64> = BTreeMap::new();
        let batch = layer.len();
        let neurons = layer[0].len();
        let mut n_val_scale = vec![vec![0.0; neurons]; batch];
        for (b, sample) in layer.iter().enumerate() {
            let mut max = sample[0];
            let mut min = sample[0];
            for &v in sample {
                if v > max {
                    max = v;
                }
                if v < min {
                    min = v;
                }
            }
            for n in 0..neurons {
                n_val_scale[b][n] = if max == min {
                    0.0
                } else {
                    (sample[n] - min) / (max - min)
                };
            }
        }
        for n in 0..neurons {
            let mut exceeds = false;
            for row in &n_val_scale {
                if row[n] > t {
                    exceeds = true;
                }
            }
            if neuron_act_map[i][n] || exceeds {
                neuron_act_map[i][n] = true;
            } else {
                let mut mean = 0.0;
                for row in &n_val_scale {
                    mean += row[n];
                }
                inactive_neurons.insert(n, mean / batch as f64);
            }
        }
        neu_cov_loss += inactive_neurons.values().sum::<f64>();
    }
    neu_cov_loss
}

pub fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}
