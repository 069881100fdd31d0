"""Two-domain OpenID Connect federation testbed.

An identity provider in domain A issues a signed identity-share token
alongside its usual tokens; a trusted identity provider in domain B accepts
that token as a grant and issues its own access token, which domain B's
resource servers honor via introspection.
"""

__version__ = "0.1.0"
