"""Thin HTTP client for the REST service; everything the CLIs use."""

import httpx

AUTH_HEADER = "X-Rucio-Auth-Token"


class ClientError(Exception):
    def __init__(self, status, code, message):
        super().__init__(f"{code}: {message}")
        self.status = status
        self.code = code


def make_client(url, token=None):
    """CLI hook point; tests swap this for an in-process client."""
    return ServiceClient(base_url=url, token=token)


class ServiceClient:
    """Typed-ish wrapper over the REST routes.

    ``http`` may be any httpx.Client-compatible object (a live connection
    or an in-process test client).
    """

    def __init__(self, base_url="http://localhost:8080", token=None,
                 http=None):
        self._http = http if http is not None else httpx.Client(
            base_url=base_url, timeout=60.0)
        self.token = token

    def close(self):
        self._http.close()

    def _request(self, method, path, json=None, params=None, content=None):
        headers = {}
        if self.token:
            headers[AUTH_HEADER] = self.token
        response = self._http.request(method, path, json=json, params=params,
                                      content=content, headers=headers)
        if response.status_code >= 400:
            try:
                body = response.json()
                raise ClientError(response.status_code,
                                  body.get("error", "Error"),
                                  body.get("message", response.text))
            except ValueError:
                raise ClientError(response.status_code, "Error",
                                  response.text) from None
        if response.headers.get("content-type", "").startswith(
                "application/octet-stream"):
            return response.content
        if response.headers.get("content-type", "").startswith("text/plain"):
            return response.text
        if response.content:
            return response.json()
        return None

    # -- auth -----------------------------------------------------------------

    def login(self, username, password, account):
        body = self._request("POST", "/auth/login", json={
            "username": username, "password": password, "account": account})
        self.token = body["token"]
        return body

    def health(self):
        return self._request("GET", "/health")

    # -- DIDs ------------------------------------------------------------------

    def add_did(self, scope, name, did_type="DATASET", **fields):
        return self._request("POST", "/dids", json={
            "scope": scope, "name": name, "did_type": did_type, **fields})

    def list_dids(self, scope, deep=False):
        return self._request("GET", f"/dids/{scope}",
                             params={"deep": deep})

    def get_did(self, scope, name):
        return self._request("GET", f"/dids/{scope}/{name}")

    def list_files(self, scope, name):
        return self._request("GET", f"/dids/{scope}/{name}/files")

    def list_content(self, scope, name, deep=False):
        return self._request("GET", f"/dids/{scope}/{name}/content",
                             params={"deep": deep})

    def attach(self, scope, name, children):
        return self._request("POST", f"/dids/{scope}/{name}/attachments",
                             json={"children": [
                                 {"scope": s, "name": n}
                                 for s, n in children]})

    def detach(self, scope, name, children):
        return self._request("DELETE", f"/dids/{scope}/{name}/attachments",
                             json={"children": [
                                 {"scope": s, "name": n}
                                 for s, n in children]})

    def set_status(self, scope, name, flag):
        return self._request("POST", f"/dids/{scope}/{name}/status",
                             json={"flag": flag})

    def get_metadata(self, scope, name):
        return self._request("GET", f"/dids/{scope}/{name}/metadata")

    def set_metadata(self, scope, name, key, value):
        return self._request("POST", f"/dids/{scope}/{name}/metadata",
                             json={"key": key, "value": value})

    # -- replicas ------------------------------------------------------------------

    def list_replicas(self, scope, name):
        return self._request("GET", f"/replicas/{scope}/{name}")

    def register_replica(self, rse, scope, name, path=None):
        return self._request("POST", "/replicas", json={
            "rse": rse, "scope": scope, "name": name, "path": path})

    def upload_content(self, rse, scope, name, payload: bytes):
        return self._request("PUT", f"/replicas/content/{rse}/{scope}/{name}",
                             content=payload)

    def download_content(self, rse, scope, name) -> bytes:
        return self._request("GET", f"/replicas/content/{rse}/{scope}/{name}")

    def declare_bad(self, replicas, reason="DECLARED"):
        return self._request("POST", "/replicas/bad", json={
            "replicas": [{"rse": r, "scope": s, "name": n}
                         for r, s, n in replicas],
            "reason": reason})

    # -- rules ----------------------------------------------------------------------

    def add_rule(self, scope, name, copies, rse_expression, **fields):
        return self._request("POST", "/rules", json={
            "scope": scope, "name": name, "copies": copies,
            "rse_expression": rse_expression, **fields})

    def list_rules(self, scope=None, name=None, account=None):
        params = {k: v for k, v in
                  (("scope", scope), ("name", name), ("account", account))
                  if v is not None}
        return self._request("GET", "/rules", params=params)

    def get_rule(self, rule_id):
        return self._request("GET", f"/rules/{rule_id}")

    def remove_rule(self, rule_id, purge=False):
        return self._request("DELETE", f"/rules/{rule_id}",
                             params={"purge": purge})

    # -- RSEs -------------------------------------------------------------------------

    def add_rse(self, rse_name, **fields):
        return self._request("POST", "/rses",
                             json={"rse_name": rse_name, **fields})

    def list_rses(self):
        return self._request("GET", "/rses")

    def get_rse(self, rse_name):
        return self._request("GET", f"/rses/{rse_name}")

    def set_rse_attribute(self, rse_name, key, value):
        return self._request("POST", f"/rses/{rse_name}/attributes",
                             json={"key": key, "value": value})

    def set_rse_limits(self, rse_name, **limits):
        return self._request("POST", f"/rses/{rse_name}/limits", json=limits)

    def set_rse_availability(self, rse_name, **flags):
        return self._request("POST", f"/rses/{rse_name}/availability",
                             json=flags)

    def set_distance(self, src, dst, value):
        return self._request("POST", f"/rses/{src}/distances",
                             json={"destination": dst, "value": value})

    def evaluate_expression(self, expression):
        return self._request("GET", "/rses/expression",
                             params={"expression": expression})

    def rse_dump(self, rse_name, flavor="catalog"):
        return self._request("GET", f"/rses/{rse_name}/dumps/{flavor}")

    # -- requests, subscriptions, accounts ----------------------------------------------

    def list_requests(self, state=None):
        params = {"state": state} if state else None
        return self._request("GET", "/requests", params=params)

    def request_metrics(self):
        return self._request("GET", "/requests/metrics")

    def add_subscription(self, templates, filter=None, account=None):
        return self._request("POST", "/subscriptions", json={
            "filter": filter or {}, "templates": templates,
            "account": account})

    def list_subscriptions(self):
        return self._request("GET", "/subscriptions")

    def add_account(self, account_name, **fields):
        return self._request("POST", "/accounts",
                             json={"account_name": account_name, **fields})

    def list_accounts(self):
        return self._request("GET", "/accounts")

    def account_usage(self, account, rse=None):
        params = {"rse": rse} if rse else None
        return self._request("GET", f"/accounts/{account}/usage",
                             params=params)

    def add_identity(self, account, username, password):
        return self._request("POST", f"/accounts/{account}/identities",
                             json={"username": username, "password": password})

    def set_quota(self, account, rse, bytes_):
        return self._request("POST", f"/accounts/{account}/limits",
                             json={"rse": rse, "bytes": bytes_})

    def add_scope(self, scope, owner):
        return self._request("POST", "/scopes",
                             json={"scope": scope, "owner": owner})

    # -- events and traces -----------------------------------------------------------------

    def create_cursor(self, name):
        return self._request("POST", "/events/cursors", json={"name": name})

    def drain_events(self, cursor, event_type=None, limit=None):
        params = {"cursor": cursor}
        if event_type:
            params["event_type"] = event_type
        if limit is not None:
            params["limit"] = limit
        return self._request("GET", "/events", params=params)

    def ack_events(self, cursor, event_id):
        return self._request("POST", "/events/ack",
                             json={"cursor": cursor, "event_id": event_id})

    def record_trace(self, **trace):
        return self._request("POST", "/traces", json=trace)

    # -- rebalancing --------------------------------------------------------------------------

    def rebalance(self, mode, **fields):
        return self._request("POST", "/rebalance",
                             json={"mode": mode, **fields})

    def list_campaigns(self):
        return self._request("GET", "/rebalance")

    def get_campaign(self, campaign_id):
        return self._request("GET", f"/rebalance/{campaign_id}")
