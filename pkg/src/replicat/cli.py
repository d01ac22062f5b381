"""User command-line tool: data-path operations against a running service."""

import json
import os
import sys

import click

from . import client as client_lib
from .checksums import adler32_hex

DEFAULT_URL = "http://localhost:8080"


def token_file_path():
    return os.environ.get(
        "REPLICAT_TOKEN_FILE",
        os.path.join(os.path.expanduser("~"), ".replicat", "token"))


def save_token(token):
    path = token_file_path()
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(token + "\n")
    os.chmod(path, 0o600)


def load_token():
    try:
        with open(token_file_path(), "r", encoding="utf-8") as fh:
            return fh.read().strip() or None
    except OSError:
        return None


def get_client(ctx) -> client_lib.ServiceClient:
    url = ctx.obj["url"]
    token = ctx.obj["token"] or load_token()
    return client_lib.make_client(url, token)


def parse_did(text):
    if ":" not in text:
        raise click.UsageError(f"DIDs are written scope:name, got {text!r}")
    scope, name = text.split(":", 1)
    return scope, name


def echo_json(data):
    click.echo(json.dumps(data, indent=2, sort_keys=True))


def run_with_errors(fn):
    try:
        return fn()
    except client_lib.ClientError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


@click.group()
@click.option("--url", envvar="REPLICAT_URL", default=DEFAULT_URL,
              help="Service base URL.")
@click.option("--token", envvar="REPLICAT_TOKEN", default=None,
              help="Auth token (default: the cached login token).")
@click.pass_context
def main(ctx, url, token):
    ctx.ensure_object(dict)
    ctx.obj["url"] = url
    ctx.obj["token"] = token


@main.command()
@click.option("--username", required=True)
@click.option("--password", required=True, prompt=False)
@click.option("--account", required=True)
@click.pass_context
def login(ctx, username, password, account):
    """Obtain and cache an auth token."""
    client = client_lib.make_client(ctx.obj["url"], None)
    body = run_with_errors(
        lambda: client.login(username, password, account))
    save_token(body["token"])
    click.echo(f"logged in as {body['account']}; "
               f"token cached at {token_file_path()}")


@main.group()
def did():
    """Work with data identifiers."""


@did.command("add")
@click.argument("did_text")
@click.option("--type", "did_type", default="DATASET",
              type=click.Choice(["FILE", "DATASET", "CONTAINER"],
                                case_sensitive=False))
@click.option("--monotonic", is_flag=True)
@click.option("--metadata", "-m", multiple=True,
              help="key=value pairs", metavar="K=V")
@click.pass_context
def did_add(ctx, did_text, did_type, monotonic, metadata):
    scope, name = parse_did(did_text)
    client = get_client(ctx)
    meta = dict(kv.split("=", 1) for kv in metadata)

    def go():
        record = client.add_did(scope, name, did_type.upper(), metadata=meta)
        if monotonic:
            client.set_status(scope, name, "SET_MONOTONIC")
        return record
    echo_json(run_with_errors(go))


@did.command("attach")
@click.argument("parent")
@click.argument("children", nargs=-1, required=True)
@click.pass_context
def did_attach(ctx, parent, children):
    scope, name = parse_did(parent)
    client = get_client(ctx)
    pairs = [parse_did(c) for c in children]
    echo_json(run_with_errors(lambda: client.attach(scope, name, pairs)))


@did.command("detach")
@click.argument("parent")
@click.argument("children", nargs=-1, required=True)
@click.pass_context
def did_detach(ctx, parent, children):
    scope, name = parse_did(parent)
    client = get_client(ctx)
    pairs = [parse_did(c) for c in children]
    echo_json(run_with_errors(lambda: client.detach(scope, name, pairs)))


@did.command("list")
@click.argument("target")
@click.option("--deep", is_flag=True, help="Include suppressed entries.")
@click.option("--files", "files_only", is_flag=True,
              help="Resolve to files transitively.")
@click.pass_context
def did_list(ctx, target, deep, files_only):
    client = get_client(ctx)
    if ":" in target:
        scope, name = parse_did(target)
        if files_only:
            rows = run_with_errors(lambda: client.list_files(scope, name))
        else:
            rows = run_with_errors(
                lambda: client.list_content(scope, name, deep=deep))
    else:
        rows = run_with_errors(lambda: client.list_dids(target, deep=deep))
    for row in rows:
        click.echo(f"{row['scope']}:{row['name']} [{row['did_type']}]")


@did.command("show")
@click.argument("did_text")
@click.pass_context
def did_show(ctx, did_text):
    scope, name = parse_did(did_text)
    client = get_client(ctx)
    echo_json(run_with_errors(lambda: client.get_did(scope, name)))


@did.command("close")
@click.argument("did_text")
@click.pass_context
def did_close(ctx, did_text):
    scope, name = parse_did(did_text)
    client = get_client(ctx)
    echo_json(run_with_errors(
        lambda: client.set_status(scope, name, "CLOSE")))


@main.group()
def rule():
    """Work with replication rules."""


@rule.command("add")
@click.argument("did_text")
@click.option("--copies", default=1, type=int)
@click.option("--rse-expression", "--rse", "rse_expression", required=True)
@click.option("--lifetime", default=None, type=float,
              help="Lifetime in seconds.")
@click.option("--weight", "weight_key", default=None)
@click.pass_context
def rule_add(ctx, did_text, copies, rse_expression, lifetime, weight_key):
    scope, name = parse_did(did_text)
    client = get_client(ctx)
    echo_json(run_with_errors(lambda: client.add_rule(
        scope, name, copies, rse_expression, lifetime=lifetime,
        weight_key=weight_key)))


@rule.command("list")
@click.option("--did", "did_text", default=None)
@click.option("--account", default=None)
@click.pass_context
def rule_list(ctx, did_text, account):
    client = get_client(ctx)
    scope = name = None
    if did_text:
        scope, name = parse_did(did_text)
    rows = run_with_errors(
        lambda: client.list_rules(scope=scope, name=name, account=account))
    for row in rows:
        click.echo(f"{row['rule_id']}  {row['did']}  {row['copies']}x "
                   f"@ {row['rse_expression']}  {row['state']}")


@rule.command("show")
@click.argument("rule_id")
@click.pass_context
def rule_show(ctx, rule_id):
    client = get_client(ctx)
    echo_json(run_with_errors(lambda: client.get_rule(rule_id)))


@rule.command("remove")
@click.argument("rule_id")
@click.option("--purge", is_flag=True,
              help="Immediate deletion eligibility (privileged).")
@click.pass_context
def rule_remove(ctx, rule_id, purge):
    client = get_client(ctx)
    echo_json(run_with_errors(
        lambda: client.remove_rule(rule_id, purge=purge)))


@main.group()
def replica():
    """Inspect replicas."""


@replica.command("list")
@click.argument("did_text")
@click.pass_context
def replica_list(ctx, did_text):
    scope, name = parse_did(did_text)
    client = get_client(ctx)
    rows = run_with_errors(lambda: client.list_replicas(scope, name))
    for row in rows:
        click.echo(f"{row['rse']}  {row['state']}  {row['path']}")


@main.command()
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
@click.option("--rse", required=True)
@click.option("--scope", required=True)
@click.option("--name", default=None, help="Defaults to the file name.")
@click.option("--rse-expression", default=None,
              help="Rule expression (defaults to the upload RSE).")
@click.option("--copies", default=1, type=int)
@click.option("--lifetime", default=None, type=float)
@click.option("--no-rule", is_flag=True, help="Skip the protecting rule.")
@click.pass_context
def upload(ctx, path, rse, scope, name, rse_expression, copies, lifetime,
           no_rule):
    """Register a file, register its replica, store the bytes, add a rule."""
    name = name or os.path.basename(path)
    with open(path, "rb") as fh:
        payload = fh.read()
    client = get_client(ctx)

    def go():
        client.add_did(scope, name, "FILE", bytes=len(payload),
                       adler32=adler32_hex(payload))
        client.register_replica(rse, scope, name)
        client.upload_content(rse, scope, name, payload)
        out = {"scope": scope, "name": name, "rse": rse,
               "bytes": len(payload)}
        if not no_rule:
            rule = client.add_rule(scope, name, copies,
                                   rse_expression or rse, lifetime=lifetime)
            out["rule_id"] = rule["rule_id"]
        return out
    echo_json(run_with_errors(go))


@main.command()
@click.argument("did_text")
@click.option("--rse", default=None, help="Prefer this RSE.")
@click.option("--out", "-o", default=".", type=click.Path(file_okay=False))
@click.option("--account", envvar="REPLICAT_ACCOUNT", default="unknown",
              help="Account name recorded in the access trace.")
@click.pass_context
def download(ctx, did_text, rse, out, account):
    """Fetch one available replica, verify its checksum, record a trace."""
    scope, name = parse_did(did_text)
    client = get_client(ctx)

    def go():
        replicas = client.list_replicas(scope, name)
        usable = [r for r in replicas if r["state"] == "AVAILABLE"]
        if rse:
            usable = [r for r in usable if r["rse"] == rse] + \
                [r for r in usable if r["rse"] != rse]
        if not usable:
            raise client_lib.ClientError(404, "UnknownReplica",
                                         f"no available replica of {did_text}")
        chosen = usable[0]
        payload = client.download_content(chosen["rse"], scope, name)
        metadata = client.get_metadata(scope, name)
        status = "ok" if adler32_hex(payload) == metadata["adler32"] \
            else "failed_checksum"
        client.record_trace(op="download", scope=scope, name=name,
                            rse=chosen["rse"], account=account, status=status)
        if status != "ok":
            raise client_lib.ClientError(409, "ChecksumMismatch",
                                         f"bad content from {chosen['rse']}")
        os.makedirs(out, exist_ok=True)
        target = os.path.join(out, name)
        with open(target, "wb") as fh:
            fh.write(payload)
        return {"written": target, "bytes": len(payload),
                "rse": chosen["rse"]}
    echo_json(run_with_errors(go))


if __name__ == "__main__":
    main()
