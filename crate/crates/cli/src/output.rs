//! Plain-text tables and CSV for reports.

use tencache_sim::SimReport;

/// Left-aligned first column, right-aligned numbers.
pub fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(header);
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

pub fn summary(r: &SimReport) -> String {
    let waits: Vec<String> = r
        .pct_wait_below
        .iter()
        .map(|b| format!("<{}us {:.2}%", b.threshold_us, b.percent))
        .collect();
    format!(
        "{}: simulated compute+stall time {:.3} us (stall {:.3} us), hit rate {:.4}, optimizer miss rate {:.4}, {}",
        r.policy,
        r.total_time_us,
        r.stall_us,
        r.hit_rate,
        r.optimizer_miss_rate,
        waits.join(" ")
    )
}

/// Column names and cells for one policy in a comparison. `speedup` is the
/// baseline's total time over this policy's.
pub fn compare_header(r: &SimReport) -> Vec<String> {
    let mut h: Vec<String> = ["policy", "total_time_us", "speedup", "hit_rate", "optimizer_miss_rate"]
        .map(String::from)
        .to_vec();
    h.extend(r.pct_wait_below.iter().map(|b| format!("wait_below_{}us_pct", b.threshold_us)));
    h.extend(["gpu_utilization", "cpu_utilization", "fp16_in_nvme"].map(String::from));
    h
}

pub fn compare_row(r: &SimReport, speedup: f64) -> Vec<String> {
    let mut row = vec![
        r.policy.clone(),
        format!("{:.3}", r.total_time_us),
        format!("{speedup:.3}"),
        format!("{:.4}", r.hit_rate),
        format!("{:.4}", r.optimizer_miss_rate),
    ];
    row.extend(r.pct_wait_below.iter().map(|b| format!("{:.2}", b.percent)));
    row.extend([
        format!("{:.4}", r.gpu_utilization_timeavg),
        format!("{:.4}", r.cpu_utilization_timeavg),
        r.fp16_in_nvme_count.to_string(),
    ]);
    row
}

pub fn csv(header: &[String], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_align() {
        let header = vec!["name".to_string(), "value".to_string()];
        let rows = vec![vec!["a".to_string(), "1.5".to_string()], vec!["long-name".to_string(), "10".to_string()]];
        assert_eq!(table(&header, &rows), "name       value\na            1.5\nlong-name     10\n");
        assert_eq!(csv(&header, &rows), "name,value\na,1.5\nlong-name,10\n");
    }
}
