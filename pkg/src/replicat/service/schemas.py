"""Pydantic request/response models for the REST surface."""

from typing import Optional

from pydantic import BaseModel, Field


class LoginRequest(BaseModel):
    username: str
    password: str
    account: str


class TokenResponse(BaseModel):
    token: str
    account: str
    expires_at: float


class DidCreate(BaseModel):
    scope: str
    name: str
    did_type: str = "DATASET"
    bytes: Optional[int] = None
    adler32: Optional[str] = None
    md5: Optional[str] = None
    metadata: dict = Field(default_factory=dict)


class DidRef(BaseModel):
    scope: str
    name: str


class AttachmentsRequest(BaseModel):
    children: list[DidRef]


class StatusRequest(BaseModel):
    flag: str


class MetadataSet(BaseModel):
    key: str
    value: str


class ReplicaCreate(BaseModel):
    rse: str
    scope: str
    name: str
    path: Optional[str] = None


class BadReplicasRequest(BaseModel):
    replicas: list[dict]
    reason: str = "DECLARED"


class RuleCreate(BaseModel):
    scope: str
    name: str
    copies: int = 1
    rse_expression: str
    lifetime: Optional[float] = None
    weight_key: Optional[str] = None
    grace_delay: Optional[float] = None
    account: Optional[str] = None
    activity: str = "user"


class ProtocolSpec(BaseModel):
    scheme: str
    endpoint: str = "localhost:0"
    prefix: str = "/"
    priorities: dict = Field(default_factory=dict)


class BackendSpec(BaseModel):
    kind: str = "memory"
    root: Optional[str] = None
    fail_probability: float = 0.0
    latency: float = 0.0


class RseCreate(BaseModel):
    rse_name: str
    deterministic: bool = True
    volatile: bool = False
    deletion_enabled: bool = True
    greedy: bool = True
    attributes: dict = Field(default_factory=dict)
    protocols: list[ProtocolSpec] = Field(default_factory=list)
    limits: dict = Field(default_factory=dict)
    availability: dict = Field(default_factory=dict)
    backend: Optional[BackendSpec] = None


class AttributeSet(BaseModel):
    key: str
    value: Optional[str] = None


class LimitsSet(BaseModel):
    min_free_space: Optional[int] = None
    total_capacity: Optional[int] = None


class AvailabilitySet(BaseModel):
    read: Optional[bool] = None
    write: Optional[bool] = None
    delete: Optional[bool] = None


class DistanceSet(BaseModel):
    destination: str
    value: int


class AccountCreate(BaseModel):
    account_name: str
    kind: str = "USER"
    privileged: bool = False
    home_scope: Optional[str] = None


class IdentityCreate(BaseModel):
    username: str
    password: str


class QuotaSet(BaseModel):
    rse: str
    bytes: int


class ScopeCreate(BaseModel):
    scope: str
    owner: str


class SubscriptionCreate(BaseModel):
    filter: dict = Field(default_factory=dict)
    templates: list[dict]
    account: Optional[str] = None


class CursorCreate(BaseModel):
    name: str


class AckRequest(BaseModel):
    cursor: str
    event_id: int


class TraceRequest(BaseModel):
    op: str
    scope: str
    name: str
    rse: str
    account: str
    status: str
    started_at: Optional[float] = None
    ended_at: Optional[float] = None


class RebalanceRequest(BaseModel):
    mode: str
    rse: Optional[str] = None
    rses: list[str] = Field(default_factory=list)
    bytes: Optional[int] = None
    volume_limit: Optional[int] = None
    files_limit: Optional[int] = None


class ErrorResponse(BaseModel):
    error: str
    message: str
