//! Order-preserving parallel map over a bounded number of in-flight items.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;

use crossbeam_channel::{bounded, Receiver};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PoolStats {
    pub items: usize,
    /// Largest number of items admitted but not yet consumed by the sink.
    pub peak_in_flight: usize,
}

/// Applies `f` to every item on `workers` threads and feeds the results to
/// `sink` in input order.
///
/// At most `max_in_flight` items exist between the producer and the sink at
/// any time, counting queued, running and reorder-buffered ones, so memory
/// stays bounded however long the input is. A sink error stops the
/// producer and is returned once the workers have drained.
pub fn ordered_map<I, T, R, E, F, S>(
    items: I,
    workers: usize,
    max_in_flight: usize,
    f: F,
    mut sink: S,
) -> Result<PoolStats, E>
where
    I: IntoIterator<Item = T>,
    I::IntoIter: Send,
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
    S: FnMut(R) -> Result<(), E>,
{
    let workers = workers.max(1);
    let max_in_flight = max_in_flight.max(workers);
    let in_flight = AtomicUsize::new(0);
    let peak = AtomicUsize::new(0);
    let items = items.into_iter();

    thread::scope(|scope| {
        let (permit_tx, permit_rx) = bounded::<()>(max_in_flight);
        for _ in 0..max_in_flight {
            permit_tx.send(()).expect("capacity reserved");
        }
        let (job_tx, job_rx) = bounded::<(usize, T)>(max_in_flight);
        let (res_tx, res_rx) = bounded::<(usize, R)>(max_in_flight);

        let in_flight_ref = &in_flight;
        let peak_ref = &peak;
        scope.spawn(move || {
            for (i, item) in items.enumerate() {
                if permit_rx.recv().is_err() {
                    return;
                }
                let now = in_flight_ref.fetch_add(1, Ordering::SeqCst) + 1;
                peak_ref.fetch_max(now, Ordering::SeqCst);
                if job_tx.send((i, item)).is_err() {
                    return;
                }
            }
        });
        for _ in 0..workers {
            let job_rx: Receiver<(usize, T)> = job_rx.clone();
            let res_tx = res_tx.clone();
            let f = &f;
            scope.spawn(move || {
                for (i, item) in job_rx.iter() {
                    if res_tx.send((i, f(item))).is_err() {
                        return;
                    }
                }
            });
        }
        drop(job_rx);
        drop(res_tx);

        let mut pending = BTreeMap::new();
        let mut next = 0usize;
        let mut outcome = Ok(());
        'recv: for (i, r) in res_rx.iter() {
            pending.insert(i, r);
            while let Some(r) = pending.remove(&next) {
                next += 1;
                if let Err(e) = sink(r) {
                    outcome = Err(e);
                    break 'recv;
                }
                in_flight.fetch_sub(1, Ordering::SeqCst);
                // Receiver may be gone once the producer has finished.
                let _ = permit_tx.send(());
            }
        }
        // Unblock everyone before the scope joins.
        drop(permit_tx);
        drop(res_rx);
        outcome.map(|()| PoolStats {
            items: next,
            peak_in_flight: peak.load(Ordering::SeqCst),
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order() {
        let mut out = Vec::new();
        let stats = ordered_map(
            0..200u64,
            4,
            8,
            |x| {
                // Uneven work so completion order differs from input order.
                std::thread::sleep(std::time::Duration::from_micros((x * 7919) % 300));
                x * x
            },
            |r| {
                out.push(r);
                Ok::<_, ()>(())
            },
        )
        .unwrap();
        assert_eq!(out, (0..200u64).map(|x| x * x).collect::<Vec<_>>());
        assert_eq!(stats.items, 200);
        assert!(stats.peak_in_flight <= 8);
    }

    #[test]
    fn sink_error_stops_early() {
        let mut seen = 0;
        let r = ordered_map(0..10_000, 2, 4, |x| x, |x| {
            seen += 1;
            if x == 10 {
                Err("stop")
            } else {
                Ok(())
            }
        });
        assert_eq!(r, Err("stop"));
        assert_eq!(seen, 11);
    }

    #[test]
    fn empty_input() {
        let stats = ordered_map(Vec::<u8>::new(), 3, 3, |x| x, |_| Ok::<_, ()>(())).unwrap();
        assert_eq!(stats, PoolStats { items: 0, peak_in_flight: 0 });
    }
}
