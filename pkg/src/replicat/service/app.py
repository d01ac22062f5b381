"""The REST service wrapping one live system.

Login at ``/auth/login`` yields a short-lived token; every other route
requires it in the ``X-Rucio-Auth-Token`` header. Errors cross the wire as
``{"error": <code>, "message": ...}`` with the code naming the module
error.
"""

from contextlib import asynccontextmanager

from fastapi import Depends, FastAPI, Header, Query, Request, Response
from fastapi.responses import JSONResponse, PlainTextResponse

from .. import daemons as daemon_registry
from .. import expression as expr
from ..backends import build_backend
from ..checksums import adler32_hex
from ..errors import AuthError, PermissionDenied, ReplicatError
from ..system import System
from . import schemas

AUTH_HEADER = "X-Rucio-Auth-Token"


def get_system(request: Request) -> System:
    return request.app.state.system


def require_account(
    request: Request,
    x_rucio_auth_token: str = Header(None, alias=AUTH_HEADER),
) -> str:
    if not x_rucio_auth_token:
        raise AuthError(f"missing {AUTH_HEADER} header")
    return get_system(request).gateway.validate(x_rucio_auth_token)


def _require_privilege(system, account):
    if not system.gateway.is_privileged(account):
        raise PermissionDenied(f"{account} is not privileged")


def _require_write(system, account, scope):
    if not system.gateway.authorize(account, "write", scope):
        raise PermissionDenied(f"{account} may not write scope {scope}")


def create_app(system: System = None, with_daemons=False,
               daemon_interval=2.0) -> FastAPI:
    @asynccontextmanager
    async def lifespan(app):
        if with_daemons:
            app.state.daemon_threads = daemon_registry.start_daemons(
                app.state.system, interval=daemon_interval)
        yield
        for thread in app.state.daemon_threads:
            thread.stop()

    app = FastAPI(title="replicat", version="0.1.0", lifespan=lifespan)
    app.state.system = system if system is not None else System()
    app.state.daemon_threads = []

    @app.exception_handler(ReplicatError)
    async def replicat_error_handler(request, exc: ReplicatError):
        return JSONResponse(status_code=exc.http_status,
                            content={"error": exc.code, "message": str(exc)})

    @app.get("/health")
    def health():
        return {"status": "ok"}

    # -- auth ---------------------------------------------------------------

    @app.post("/auth/login", response_model=schemas.TokenResponse)
    def login(body: schemas.LoginRequest, system=Depends(get_system)):
        record = system.gateway.login(body.username, body.password,
                                      body.account)
        return {"token": record["token"], "account": record["account"],
                "expires_at": record["expires_at"]}

    # -- DIDs ----------------------------------------------------------------

    @app.post("/dids", status_code=201)
    def add_did(body: schemas.DidCreate, system=Depends(get_system),
                account=Depends(require_account)):
        _require_write(system, account, body.scope)
        return system.catalog.add_did(
            body.scope, body.name, body.did_type, account,
            bytes_=body.bytes, adler32=body.adler32, md5=body.md5,
            metadata=body.metadata)

    @app.get("/dids/{scope}")
    def list_dids(scope: str, deep: bool = False,
                  system=Depends(get_system),
                  account=Depends(require_account)):
        return system.catalog.list_dids(scope, deep=deep)

    @app.get("/dids/{scope}/{name}")
    def get_did(scope: str, name: str, system=Depends(get_system),
                account=Depends(require_account)):
        return system.catalog.get_did(scope, name)

    @app.get("/dids/{scope}/{name}/files")
    def list_files(scope: str, name: str, system=Depends(get_system),
                   account=Depends(require_account)):
        return system.catalog.list_files(scope, name)

    @app.get("/dids/{scope}/{name}/content")
    def list_content(scope: str, name: str, deep: bool = False,
                     system=Depends(get_system),
                     account=Depends(require_account)):
        return system.catalog.list_content(scope, name, deep=deep)

    @app.post("/dids/{scope}/{name}/attachments")
    def attach(scope: str, name: str, body: schemas.AttachmentsRequest,
               system=Depends(get_system), account=Depends(require_account)):
        _require_write(system, account, scope)
        count = system.catalog.attach(
            scope, name, [(c.scope, c.name) for c in body.children])
        return {"attached": count}

    @app.delete("/dids/{scope}/{name}/attachments")
    def detach(scope: str, name: str, body: schemas.AttachmentsRequest,
               system=Depends(get_system), account=Depends(require_account)):
        _require_write(system, account, scope)
        count = system.catalog.detach(
            scope, name, [(c.scope, c.name) for c in body.children],
            privileged=system.gateway.is_privileged(account))
        return {"detached": count}

    @app.post("/dids/{scope}/{name}/status")
    def set_status(scope: str, name: str, body: schemas.StatusRequest,
                   system=Depends(get_system),
                   account=Depends(require_account)):
        _require_write(system, account, scope)
        return system.catalog.set_status(scope, name, body.flag)

    @app.get("/dids/{scope}/{name}/metadata")
    def get_metadata(scope: str, name: str, system=Depends(get_system),
                     account=Depends(require_account)):
        return system.catalog.get_metadata(scope, name)

    @app.post("/dids/{scope}/{name}/metadata")
    def set_metadata(scope: str, name: str, body: schemas.MetadataSet,
                     system=Depends(get_system),
                     account=Depends(require_account)):
        _require_write(system, account, scope)
        system.catalog.set_metadata(scope, name, body.key, body.value)
        return {"set": body.key}

    # -- replicas -------------------------------------------------------------

    @app.get("/replicas/{scope}/{name}")
    def list_replicas(scope: str, name: str, system=Depends(get_system),
                      account=Depends(require_account)):
        return system.storage.list_replicas(scope, name)

    @app.post("/replicas", status_code=201)
    def register_replica(body: schemas.ReplicaCreate,
                         system=Depends(get_system),
                         account=Depends(require_account)):
        _require_write(system, account, body.scope)
        did = system.catalog.get_raw(body.scope, body.name)
        with system.store.transaction() as txn:
            return system.storage.register_replica(
                txn, body.rse, body.scope, body.name, "COPYING",
                did["bytes"], did["adler32"], path=body.path)

    @app.put("/replicas/content/{rse}/{scope}/{name}")
    async def upload_content(rse: str, scope: str, name: str,
                             request: Request, system=Depends(get_system),
                             account=Depends(require_account)):
        _require_write(system, account, scope)
        payload = await request.body()
        replica = system.storage.get_replica(rse, scope, name)
        did = system.catalog.get_raw(scope, name)
        if adler32_hex(payload) != did["adler32"]:
            raise ReplicatError("content does not match the declared adler32")
        system.backends.get(rse).put(replica["path"], payload)
        with system.store.transaction() as txn:
            row = txn.get("replicas", f"{rse}|{scope}:{name}")
            txn.put("replicas", f"{rse}|{scope}:{name}",
                    dict(row, state="AVAILABLE"))
        return {"stored": len(payload), "path": replica["path"]}

    @app.get("/replicas/content/{rse}/{scope}/{name}")
    def download_content(rse: str, scope: str, name: str,
                         system=Depends(get_system),
                         account=Depends(require_account)):
        replica = system.storage.get_replica(rse, scope, name)
        if replica["state"] != "AVAILABLE":
            raise ReplicatError(f"replica is {replica['state']}")
        data = system.backends.get(rse).get(replica["path"])
        return Response(content=data, media_type="application/octet-stream")

    @app.post("/replicas/bad")
    def declare_bad(body: schemas.BadReplicasRequest,
                    system=Depends(get_system),
                    account=Depends(require_account)):
        count = system.auditor.declare_bad(
            [(r["rse"], r["scope"], r["name"]) for r in body.replicas],
            reason=body.reason, declarer=account)
        return {"declared": count}

    @app.post("/replicas/{rse}/{scope}/{name}/access")
    def record_access(rse: str, scope: str, name: str,
                      system=Depends(get_system),
                      account=Depends(require_account)):
        return system.storage.record_access(rse, scope, name)

    # -- rules ------------------------------------------------------------------

    @app.post("/rules", status_code=201)
    def add_rule(body: schemas.RuleCreate, system=Depends(get_system),
                 account=Depends(require_account)):
        owner = body.account or account
        if owner != account:
            _require_privilege(system, account)
        return system.rules.add_rule(
            owner, body.scope, body.name, body.copies, body.rse_expression,
            lifetime=body.lifetime, weight_key=body.weight_key,
            grace_delay=body.grace_delay, activity=body.activity)

    @app.get("/rules")
    def list_rules(scope: str = None, name: str = None,
                   rule_account: str = Query(None, alias="account"),
                   system=Depends(get_system),
                   account=Depends(require_account)):
        return system.rules.list_rules(scope=scope, name=name,
                                       account=rule_account)

    @app.get("/rules/{rule_id}")
    def get_rule(rule_id: str, system=Depends(get_system),
                 account=Depends(require_account)):
        return system.rules.get_rule(rule_id)

    @app.get("/rules/{rule_id}/locks")
    def rule_locks(rule_id: str, system=Depends(get_system),
                   account=Depends(require_account)):
        system.rules.get_rule(rule_id)
        return system.rules.locks_of(rule_id)

    @app.delete("/rules/{rule_id}")
    def remove_rule(rule_id: str, purge: bool = False,
                    system=Depends(get_system),
                    account=Depends(require_account)):
        system.rules.remove_rule(rule_id, account=account, purge_now=purge)
        return {"removed": rule_id}

    # -- RSEs -----------------------------------------------------------------------

    @app.post("/rses", status_code=201)
    def add_rse(body: schemas.RseCreate, system=Depends(get_system),
                account=Depends(require_account)):
        _require_privilege(system, account)
        protocols = [p.model_dump() for p in body.protocols] or \
            [{"scheme": "mock", "prefix": "/data"}]
        spec = (body.backend or schemas.BackendSpec()).model_dump(
            exclude_none=True)
        record = system.storage.add_rse(
            body.rse_name, deterministic=body.deterministic,
            volatile=body.volatile, deletion_enabled=body.deletion_enabled,
            attributes=body.attributes, protocols=protocols,
            limits=body.limits, availability=body.availability,
            greedy=body.greedy, backend=spec)
        system.backends.attach(body.rse_name, build_backend(
            body.rse_name,
            dict(spec, capacity=body.limits.get("total_capacity")),
            rng=system.rng_for(f"backend:{body.rse_name}")))
        return record

    @app.get("/rses")
    def list_rses(system=Depends(get_system),
                  account=Depends(require_account)):
        return system.storage.list_rses()

    @app.get("/rses/expression")
    def evaluate_expression(expression: str, system=Depends(get_system),
                            account=Depends(require_account)):
        return sorted(expr.resolve(expression, system.storage.registry()))

    @app.get("/rses/{rse_name}")
    def get_rse(rse_name: str, system=Depends(get_system),
                account=Depends(require_account)):
        return system.storage.get_rse(rse_name)

    @app.post("/rses/{rse_name}/attributes")
    def set_attribute(rse_name: str, body: schemas.AttributeSet,
                      system=Depends(get_system),
                      account=Depends(require_account)):
        _require_privilege(system, account)
        system.storage.set_attribute(rse_name, body.key, body.value)
        return system.storage.get_rse(rse_name)

    @app.post("/rses/{rse_name}/limits")
    def set_limits(rse_name: str, body: schemas.LimitsSet,
                   system=Depends(get_system),
                   account=Depends(require_account)):
        _require_privilege(system, account)
        limits = {k: v for k, v in body.model_dump().items()
                  if v is not None}
        system.storage.set_limits(rse_name, **limits)
        return system.storage.get_rse(rse_name)

    @app.post("/rses/{rse_name}/availability")
    def set_availability(rse_name: str, body: schemas.AvailabilitySet,
                         system=Depends(get_system),
                         account=Depends(require_account)):
        _require_privilege(system, account)
        flags = {k: v for k, v in body.model_dump().items() if v is not None}
        system.storage.set_availability(rse_name, **flags)
        return system.storage.get_rse(rse_name)

    @app.post("/rses/{rse_name}/distances")
    def set_distance(rse_name: str, body: schemas.DistanceSet,
                     system=Depends(get_system),
                     account=Depends(require_account)):
        _require_privilege(system, account)
        system.storage.set_distance(rse_name, body.destination, body.value)
        return {"source": rse_name, "destination": body.destination,
                "value": body.value}

    @app.get("/rses/{rse_name}/dumps/{flavor}")
    def rse_dump(rse_name: str, flavor: str, system=Depends(get_system),
                 account=Depends(require_account)):
        if flavor == "storage":
            paths = system.storage.storage_dump(rse_name)
        elif flavor == "catalog":
            paths = system.storage.catalog_dump(rse_name)
        else:
            raise ReplicatError(f"unknown dump flavor {flavor!r}")
        body = "".join(p + "\n" for p in paths)
        return PlainTextResponse(body)

    # -- requests ----------------------------------------------------------------------

    @app.get("/requests")
    def list_requests(state: str = None, system=Depends(get_system),
                      account=Depends(require_account)):
        return system.transfer.list_requests(state=state)

    @app.get("/requests/metrics")
    def request_metrics(system=Depends(get_system),
                        account=Depends(require_account)):
        return {"requests": system.transfer.metrics(),
                "counters": system.gateway.counters()}

    # -- subscriptions -------------------------------------------------------------------

    @app.post("/subscriptions", status_code=201)
    def add_subscription(body: schemas.SubscriptionCreate,
                         system=Depends(get_system),
                         account=Depends(require_account)):
        owner = body.account or account
        if owner != account:
            _require_privilege(system, account)
        return system.rules.add_subscription(owner, body.filter,
                                             body.templates)

    @app.get("/subscriptions")
    def list_subscriptions(system=Depends(get_system),
                           account=Depends(require_account)):
        return system.rules.list_subscriptions()

    # -- accounts ------------------------------------------------------------------------

    @app.post("/accounts", status_code=201)
    def add_account(body: schemas.AccountCreate, system=Depends(get_system),
                    account=Depends(require_account)):
        _require_privilege(system, account)
        return system.gateway.add_account(
            body.account_name, kind=body.kind, privileged=body.privileged,
            home_scope=body.home_scope)

    @app.get("/accounts")
    def list_accounts(system=Depends(get_system),
                      account=Depends(require_account)):
        return system.gateway.list_accounts()

    @app.get("/accounts/{name}/usage")
    def account_usage(name: str, rse: str = None,
                      system=Depends(get_system),
                      account=Depends(require_account)):
        return system.rules.account_usage(name, rse=rse)

    @app.post("/accounts/{name}/identities", status_code=201)
    def add_identity(name: str, body: schemas.IdentityCreate,
                     system=Depends(get_system),
                     account=Depends(require_account)):
        _require_privilege(system, account)
        system.gateway.add_identity(body.username, body.password, name)
        return {"username": body.username, "account": name}

    @app.post("/accounts/{name}/limits")
    def set_quota(name: str, body: schemas.QuotaSet,
                  system=Depends(get_system),
                  account=Depends(require_account)):
        _require_privilege(system, account)
        system.rules.set_limit(name, body.rse, body.bytes)
        return {"account": name, "rse": body.rse, "bytes": body.bytes}

    @app.post("/scopes", status_code=201)
    def add_scope(body: schemas.ScopeCreate, system=Depends(get_system),
                  account=Depends(require_account)):
        _require_privilege(system, account)
        system.gateway.add_scope(body.scope, body.owner)
        return {"scope": body.scope, "owner": body.owner}

    # -- events ---------------------------------------------------------------------------

    @app.post("/events/cursors", status_code=201)
    def create_cursor(body: schemas.CursorCreate, system=Depends(get_system),
                      account=Depends(require_account)):
        system.gateway.create_cursor(body.name)
        return {"cursor": body.name}

    @app.get("/events")
    def drain_events(cursor: str, event_type: str = None, limit: int = None,
                     system=Depends(get_system),
                     account=Depends(require_account)):
        return system.gateway.drain(cursor, event_type=event_type,
                                    limit=limit)

    @app.post("/events/ack")
    def ack_events(body: schemas.AckRequest, system=Depends(get_system),
                   account=Depends(require_account)):
        system.gateway.ack(body.cursor, body.event_id)
        return {"cursor": body.cursor, "position": body.event_id}

    # -- traces -----------------------------------------------------------------------------

    @app.post("/traces", status_code=201)
    def record_trace(body: schemas.TraceRequest, system=Depends(get_system),
                     account=Depends(require_account)):
        accepted = system.gateway.record_trace(
            {k: v for k, v in body.model_dump().items() if v is not None})
        return {"accepted": accepted}

    # -- rebalancing --------------------------------------------------------------------------

    @app.post("/rebalance", status_code=201)
    def start_rebalance(body: schemas.RebalanceRequest,
                        system=Depends(get_system),
                        account=Depends(require_account)):
        _require_privilege(system, account)
        mode = body.mode.lower()
        if mode == "decommission":
            return system.rebalancer.decommission(body.rse)
        if mode == "manual":
            return system.rebalancer.manual_rebalance(body.rse, body.bytes)
        if mode == "background":
            return system.rebalancer.background_cycle(
                body.rses, volume_limit=body.volume_limit,
                files_limit=body.files_limit)
        raise ReplicatError(f"unknown rebalance mode {body.mode!r}")

    @app.get("/rebalance")
    def list_campaigns(system=Depends(get_system),
                       account=Depends(require_account)):
        return system.rebalancer.list_campaigns()

    @app.get("/rebalance/{campaign_id}")
    def get_campaign(campaign_id: str, system=Depends(get_system),
                     account=Depends(require_account)):
        return system.rebalancer.get_campaign(campaign_id)

    return app
