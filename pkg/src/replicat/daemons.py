"""Registry of daemon passes, for the CLI runner and the scenario harness.

Each entry is one cycle of one daemon kind; the harness calls them
round-robin per tick, a service deployment loops them in threads. Work is
partitioned across workers of the same kind through the heartbeat registry.
"""

import logging
import threading

log = logging.getLogger(__name__)


def _evaluator(system, worker):
    return system.rules.evaluate_attachments(worker)


def _matcher(system, worker):
    return len(system.rules.match_subscriptions(worker))


def _submitter(system, worker):
    return system.transfer.submit_pending(worker)


def _poller(system, worker):
    return system.transfer.poll_submitted(worker)


def _finisher(system, worker):
    return system.transfer.finish(worker)


def _repairer(system, worker):
    return system.rules.repair_stuck(worker)["repaired"]


def _expirer(system, worker):
    return system.reaper.expire_rules(worker)


def _reaper(system, worker):
    return system.reaper.reap_all(worker)


def _recoverer(system, worker):
    return system.auditor.recover_bad(worker)["recovering"]


def _rebalancer(system, worker):
    return system.rebalancer.cycle(worker)


DAEMONS = {
    "evaluator": _evaluator,
    "matcher": _matcher,
    "submitter": _submitter,
    "poller": _poller,
    "finisher": _finisher,
    "repairer": _repairer,
    "expirer": _expirer,
    "reaper": _reaper,
    "recoverer": _recoverer,
    "rebalancer": _rebalancer,
}

# The order one full tick runs them in; downstream stages come after the
# stages that feed them so a tick makes maximal progress.
CYCLE_ORDER = [
    "matcher", "evaluator", "submitter", "poller", "finisher",
    "repairer", "expirer", "reaper", "recoverer", "rebalancer",
]


def run_once(system, kind, worker="0"):
    return DAEMONS[kind](system, worker)


def run_tick(system, worker="0", kinds=None):
    results = {}
    for kind in (kinds or CYCLE_ORDER):
        results[kind] = DAEMONS[kind](system, worker)
    return results


class DaemonThread(threading.Thread):
    """Loops one daemon kind against a live system (service deployments)."""

    def __init__(self, system, kind, worker="0", interval=5.0):
        super().__init__(daemon=True, name=f"{kind}-{worker}")
        self.system = system
        self.kind = kind
        self.worker = worker
        self.interval = interval
        self._stop = threading.Event()

    def run(self):
        while not self._stop.is_set():
            try:
                run_once(self.system, self.kind, self.worker)
            except Exception:
                log.exception("%s cycle failed; continuing", self.kind)
            self._stop.wait(self.interval)

    def stop(self):
        self._stop.set()


def start_daemons(system, kinds=None, interval=5.0):
    threads = [DaemonThread(system, kind, interval=interval)
               for kind in (kinds or CYCLE_ORDER)]
    for thread in threads:
        thread.start()
    return threads
