"""Administrator command-line tool.

Most verbs are thin REST clients like the user tool; the server-side verbs
(`serve`, `daemon run`, `scenario run`, file-based `audit run`) work on the
store directly, the way daemons do in a real deployment.
"""

import json
import sys

import click

from . import auditor as auditor_mod
from . import daemons as daemon_registry
from . import scenario as scenario_mod
from .cli import echo_json, get_client, run_with_errors
from .store import FileStore, MemoryStore
from .system import System


@click.group()
@click.option("--url", envvar="REPLICAT_URL",
              default="http://localhost:8080")
@click.option("--token", envvar="REPLICAT_TOKEN", default=None)
@click.pass_context
def main(ctx, url, token):
    ctx.ensure_object(dict)
    ctx.obj["url"] = url
    ctx.obj["token"] = token


# -- RSE management -------------------------------------------------------------

@main.group()
def rse():
    """Manage storage elements."""


@rse.command("add")
@click.argument("rse_name")
@click.option("--attribute", "-a", multiple=True, metavar="K=V")
@click.option("--non-deterministic", is_flag=True)
@click.option("--volatile", is_flag=True)
@click.option("--no-deletion", is_flag=True)
@click.option("--threshold-mode", is_flag=True,
              help="Non-greedy (LRU, threshold-driven) deletion.")
@click.option("--capacity", type=int, default=None)
@click.option("--min-free", type=int, default=None)
@click.option("--scheme", default="mock")
@click.option("--prefix", default="/data")
@click.option("--backend", "backend_kind", default="memory",
              type=click.Choice(["memory", "filesystem"]))
@click.option("--backend-root", default=None)
@click.pass_context
def rse_add(ctx, rse_name, attribute, non_deterministic, volatile,
            no_deletion, threshold_mode, capacity, min_free, scheme, prefix,
            backend_kind, backend_root):
    client = get_client(ctx)
    limits = {}
    if capacity is not None:
        limits["total_capacity"] = capacity
    if min_free is not None:
        limits["min_free_space"] = min_free
    echo_json(run_with_errors(lambda: client.add_rse(
        rse_name,
        deterministic=not non_deterministic,
        volatile=volatile,
        deletion_enabled=not no_deletion,
        greedy=not threshold_mode,
        attributes=dict(kv.split("=", 1) for kv in attribute),
        protocols=[{"scheme": scheme, "prefix": prefix}],
        limits=limits,
        backend={"kind": backend_kind, "root": backend_root})))


@rse.command("list")
@click.pass_context
def rse_list(ctx):
    client = get_client(ctx)
    for row in run_with_errors(client.list_rses):
        click.echo(f"{row['rse_name']}  deterministic={row['deterministic']} "
                   f"volatile={row['volatile']}")


@rse.command("show")
@click.argument("rse_name")
@click.pass_context
def rse_show(ctx, rse_name):
    client = get_client(ctx)
    echo_json(run_with_errors(lambda: client.get_rse(rse_name)))


@rse.command("set-attribute")
@click.argument("rse_name")
@click.argument("key")
@click.argument("value")
@click.pass_context
def rse_set_attribute(ctx, rse_name, key, value):
    client = get_client(ctx)
    echo_json(run_with_errors(
        lambda: client.set_rse_attribute(rse_name, key, value)))


@rse.command("set-limits")
@click.argument("rse_name")
@click.option("--capacity", type=int, default=None)
@click.option("--min-free", type=int, default=None)
@click.pass_context
def rse_set_limits(ctx, rse_name, capacity, min_free):
    client = get_client(ctx)
    limits = {}
    if capacity is not None:
        limits["total_capacity"] = capacity
    if min_free is not None:
        limits["min_free_space"] = min_free
    echo_json(run_with_errors(
        lambda: client.set_rse_limits(rse_name, **limits)))


@rse.command("set-distance")
@click.argument("src")
@click.argument("dst")
@click.argument("value", type=int)
@click.pass_context
def rse_set_distance(ctx, src, dst, value):
    client = get_client(ctx)
    echo_json(run_with_errors(lambda: client.set_distance(src, dst, value)))


@rse.command("set-availability")
@click.argument("rse_name")
@click.option("--read/--no-read", default=None)
@click.option("--write/--no-write", default=None)
@click.option("--delete/--no-delete", default=None)
@click.pass_context
def rse_set_availability(ctx, rse_name, read, write, delete):
    client = get_client(ctx)
    flags = {k: v for k, v in
             (("read", read), ("write", write), ("delete", delete))
             if v is not None}
    echo_json(run_with_errors(
        lambda: client.set_rse_availability(rse_name, **flags)))


@main.command("rse-expr")
@click.argument("action", type=click.Choice(["eval"]))
@click.argument("expression")
@click.pass_context
def rse_expr(ctx, action, expression):
    """Evaluate an RSE expression; one matching RSE per line."""
    client = get_client(ctx)
    for name in run_with_errors(
            lambda: client.evaluate_expression(expression)):
        click.echo(name)


# -- accounts and quotas -----------------------------------------------------------

@main.group()
def account():
    """Manage accounts and identities."""


@account.command("add")
@click.argument("account_name")
@click.option("--kind", default="USER",
              type=click.Choice(["USER", "GROUP", "SERVICE"]))
@click.option("--privileged", is_flag=True)
@click.option("--home-scope", default=None)
@click.pass_context
def account_add(ctx, account_name, kind, privileged, home_scope):
    client = get_client(ctx)
    echo_json(run_with_errors(lambda: client.add_account(
        account_name, kind=kind, privileged=privileged,
        home_scope=home_scope)))


@account.command("list")
@click.pass_context
def account_list(ctx):
    client = get_client(ctx)
    for row in run_with_errors(client.list_accounts):
        click.echo(f"{row['account_name']}  {row['kind']} "
                   f"privileged={row['privileged']}")


@account.command("usage")
@click.argument("account_name")
@click.option("--rse", default=None)
@click.pass_context
def account_usage(ctx, account_name, rse):
    client = get_client(ctx)
    echo_json(run_with_errors(
        lambda: client.account_usage(account_name, rse=rse)))


@account.command("add-identity")
@click.argument("account_name")
@click.option("--username", required=True)
@click.option("--password", required=True)
@click.pass_context
def account_add_identity(ctx, account_name, username, password):
    client = get_client(ctx)
    echo_json(run_with_errors(
        lambda: client.add_identity(account_name, username, password)))


@main.command("quota")
@click.argument("action", type=click.Choice(["set"]))
@click.argument("account_name")
@click.argument("rse_name")
@click.argument("bytes_", type=int, metavar="BYTES")
@click.pass_context
def quota(ctx, action, account_name, rse_name, bytes_):
    client = get_client(ctx)
    echo_json(run_with_errors(
        lambda: client.set_quota(account_name, rse_name, bytes_)))


@main.command("scope")
@click.argument("action", type=click.Choice(["add"]))
@click.argument("scope_name")
@click.option("--owner", required=True)
@click.pass_context
def scope(ctx, action, scope_name, owner):
    client = get_client(ctx)
    echo_json(run_with_errors(lambda: client.add_scope(scope_name, owner)))


# -- subscriptions ---------------------------------------------------------------------

@main.group()
def subscription():
    """Manage subscriptions."""


@subscription.command("add")
@click.option("--account", default=None)
@click.option("--scope-pattern", default=".*")
@click.option("--name-pattern", default=".*")
@click.option("--match", "-m", multiple=True, metavar="K=V",
              help="Metadata equality filters.")
@click.option("--template", "-t", multiple=True, required=True,
              metavar="COPIES@EXPR[@LIFETIME]")
@click.pass_context
def subscription_add(ctx, account, scope_pattern, name_pattern, match,
                     template):
    client = get_client(ctx)
    templates = []
    for text in template:
        parts = text.split("@")
        entry = {"copies": int(parts[0]), "rse_expression": parts[1]}
        if len(parts) > 2:
            entry["lifetime"] = float(parts[2])
        templates.append(entry)
    filter_spec = {
        "scope_pattern": scope_pattern,
        "name_pattern": name_pattern,
        "metadata_matches": dict(kv.split("=", 1) for kv in match),
    }
    echo_json(run_with_errors(lambda: client.add_subscription(
        templates, filter=filter_spec, account=account)))


@subscription.command("list")
@click.pass_context
def subscription_list(ctx):
    client = get_client(ctx)
    echo_json(run_with_errors(client.list_subscriptions))


# -- rebalancing -------------------------------------------------------------------------

@main.group()
def rebalance():
    """Move rule-protected data between RSEs."""


@rebalance.command("background")
@click.argument("rses", nargs=-1, required=True)
@click.option("--volume-limit", type=int, default=None)
@click.option("--files-limit", type=int, default=None)
@click.pass_context
def rebalance_background(ctx, rses, volume_limit, files_limit):
    client = get_client(ctx)
    echo_json(run_with_errors(lambda: client.rebalance(
        "background", rses=list(rses), volume_limit=volume_limit,
        files_limit=files_limit)))


@rebalance.command("decommission")
@click.argument("rse_name")
@click.pass_context
def rebalance_decommission(ctx, rse_name):
    client = get_client(ctx)

    def go():
        client.set_rse_availability(rse_name, write=False)
        return client.rebalance("decommission", rse=rse_name)
    echo_json(run_with_errors(go))


@rebalance.command("manual")
@click.argument("rse_name")
@click.argument("volume", type=int)
@click.pass_context
def rebalance_manual(ctx, rse_name, volume):
    client = get_client(ctx)
    echo_json(run_with_errors(
        lambda: client.rebalance("manual", rse=rse_name, bytes=volume)))


@rebalance.command("status")
@click.pass_context
def rebalance_status(ctx):
    client = get_client(ctx)
    echo_json(run_with_errors(client.list_campaigns))


# -- audits ---------------------------------------------------------------------------------

@main.group()
def audit():
    """Catalog/storage consistency audits."""


@audit.command("run")
@click.option("--rse", "rse_name", required=True)
@click.option("--storage-dump", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--before", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--after", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--apply", "apply_actions", is_flag=True,
              help="Queue dark deletions / flag lost replicas "
                   "(needs --state-file).")
@click.option("--state-file", default=None,
              type=click.Path(dir_okay=False))
def audit_run(rse_name, storage_dump, before, after, apply_actions,
              state_file):
    """Classify three dump files and report counts per category."""
    def lines(path):
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if line:
                    yield line

    if apply_actions:
        if state_file is None:
            click.echo("--apply requires --state-file", err=True)
            sys.exit(2)
        system = System(store=FileStore(state_file))
        report, _ = system.auditor.run_audit(
            rse_name, lines(storage_dump), lines(before), lines(after),
            apply=True)
    else:
        classification = auditor_mod.classify(
            lines(before), lines(storage_dump), lines(after))
        report = {category: len(paths)
                  for category, paths in classification.items()}
        report["rse"] = rse_name
    echo_json(report)


# -- daemons, scenarios, service --------------------------------------------------------------

@main.group()
def daemon():
    """Run daemon cycles."""


@daemon.command("run")
@click.argument("kind", type=click.Choice(sorted(daemon_registry.DAEMONS)))
@click.option("--once/--loop", default=True)
@click.option("--interval", type=float, default=5.0)
@click.option("--worker", default="0")
@click.option("--rse", "rse_expression", default=None,
              help="Reaper only: RSE expression limiting the sweep.")
@click.option("--mode", type=click.Choice(["greedy", "threshold"]),
              default=None, help="Reaper only: override the per-RSE mode.")
@click.option("--state-file", required=True,
              type=click.Path(dir_okay=False))
def daemon_run(kind, once, interval, worker, rse_expression, mode,
               state_file):
    """Run one daemon against a state file (single process at a time)."""
    import time as _time

    from . import expression as expr

    system = System(store=FileStore(state_file))
    system.attach_backends()

    def reaper_pass():
        matched = sorted(expr.resolve(rse_expression,
                                      system.storage.registry()))
        total = 0
        for rse_name in matched:
            record = system.storage.get_rse(rse_name)
            if not record["deletion_enabled"]:
                continue
            total += system.reaper.reap(rse_name, worker, mode=mode)
            total += system.reaper.process_dark(rse_name, worker)
        return total

    while True:
        if kind == "reaper" and rse_expression is not None:
            result = reaper_pass()
        else:
            result = daemon_registry.run_once(system, kind, worker)
        click.echo(f"{kind}: {result}")
        if once:
            break
        _time.sleep(interval)


@main.group()
def scenario():
    """Deterministic simulation runs."""


@scenario.command("run")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=0)
@click.option("--workdir", default=None,
              type=click.Path(file_okay=False))
@click.option("--report-file", default=None,
              type=click.Path(dir_okay=False))
def scenario_run(path, seed, workdir, report_file):
    """Run a scenario file and print (or save) its report."""
    report = scenario_mod.run_scenario(path, seed=seed, workdir=workdir)
    text = scenario_mod.report_json(report)
    if report_file:
        with open(report_file, "w", encoding="utf-8") as fh:
            fh.write(text)
        click.echo(f"report written to {report_file}")
    else:
        click.echo(text, nl=False)
    violations = report["invariants"]["violations"]
    if violations:
        sys.exit(1)


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8080)
@click.option("--state-file", default=None, type=click.Path(dir_okay=False))
@click.option("--with-daemons/--no-daemons", default=True)
@click.option("--daemon-interval", type=float, default=2.0)
@click.option("--bootstrap-account", default="root",
              help="Privileged account created on first start.")
@click.option("--bootstrap-username", default=None)
@click.option("--bootstrap-password", default=None)
def serve(host, port, state_file, with_daemons, daemon_interval,
          bootstrap_account, bootstrap_username, bootstrap_password):
    """Run the REST service (daemons included by default)."""
    import uvicorn

    from .service import create_app

    store = FileStore(state_file) if state_file else MemoryStore()
    system = System(store=store)
    system.attach_backends()
    with system.store.transaction() as txn:
        missing = txn.get("accounts", bootstrap_account) is None
    if missing:
        system.gateway.add_account(bootstrap_account, privileged=True)
        if bootstrap_username and bootstrap_password:
            system.gateway.add_identity(
                bootstrap_username, bootstrap_password, bootstrap_account)
    app = create_app(system, with_daemons=with_daemons,
                     daemon_interval=daemon_interval)
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
