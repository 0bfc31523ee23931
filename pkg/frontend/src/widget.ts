// Embeddable gate widget: opens a challenge session against a gate server,
// renders one challenge at a time, submits typed answers, and on success
// fetches the protected resource with the issued token.
//
// The widget mirrors server truth only: it never sees solutions and holds
// no correctness logic of its own. All traffic uses exactly four requests:
// open session, get challenge, post answer, fetch resource.

export interface WidgetOptions {
	serverBaseUrl: string
	autoStart?: boolean
	// Path under /protected/ fetched after a granted decision.
	resourcePath?: string
	// Injectable for tests; defaults to the page's fetch.
	fetchImpl?: typeof fetch
}

export type WidgetPhase =
	| "idle"
	| "working"
	| "challenge"
	| "granted"
	| "denied"
	| "unavailable"
	| "expired"
	| "error"

interface SessionDescriptor {
	session_id: string
	t_num: number
	level: string
	feedback_mode: string
	per_challenge_deadline: number | null
}

interface ClueWire {
	domain: string
	text: string
}

interface ChallengeWire {
	challenge_id: string
	preamble: string
	clues: ClueWire[]
	number: number
	remaining_after_this: number
}

interface DecisionWire {
	granted: boolean
	correct_count: number
	sent_count: number
	token?: string
}

interface AnswerOutcome {
	sent_count: number
	remaining: number
	correct?: boolean
	decision?: DecisionWire
}

export class GateWidget {
	private phase: WidgetPhase = "idle"
	private session: SessionDescriptor | null = null
	private challenge: ChallengeWire | null = null
	private decision: DecisionWire | null = null
	private resourceBody: string | null = null
	private lastFeedback: boolean | null = null
	private statusNote = ""
	private inFlight = false
	private retryAction: (() => void) | null = null
	private countdownLeft: number | null = null
	private countdownTimer: ReturnType<typeof setInterval> | null = null
	// Answers the user entered this session (progress bookkeeping only).
	readonly answersEntered: string[] = []

	private readonly fetchImpl: typeof fetch

	constructor(private container: HTMLElement, private options: WidgetOptions) {
		this.fetchImpl = options.fetchImpl ?? fetch.bind(globalThis)
		this.render()
		if (options.autoStart) {
			void this.start()
		}
	}

	get currentPhase(): WidgetPhase {
		return this.phase
	}

	get sessionId(): string | null {
		return this.session ? this.session.session_id : null
	}

	// -- server interaction -------------------------------------------------

	private url(path: string): string {
		return this.options.serverBaseUrl.replace(/\/$/, "") + path
	}

	async start(): Promise<void> {
		if (this.inFlight) return
		this.reset()
		this.phase = "working"
		this.render()
		this.inFlight = true
		try {
			const response = await this.fetchImpl(this.url("/gate/sessions"), {
				method: "POST",
			})
			if (response.status === 503) {
				this.phase = "unavailable"
				return
			}
			if (response.status !== 201) {
				this.fail(`session open failed (${response.status})`, () => void this.start())
				return
			}
			this.session = (await response.json()) as SessionDescriptor
		} catch {
			this.fail("network failure while opening a session", () => void this.start())
			return
		} finally {
			this.inFlight = false
			this.render()
		}
		await this.fetchChallenge()
	}

	private async fetchChallenge(): Promise<void> {
		if (this.inFlight || !this.session) return
		const sid = this.session.session_id
		this.inFlight = true
		this.phase = "working"
		this.render()
		try {
			const response = await this.fetchImpl(
				this.url(`/gate/sessions/${sid}/challenge`),
				{ method: "GET" },
			)
			if (this.sessionId !== sid) return // superseded by a restart
			if (response.status === 410) {
				this.phase = "expired"
				return
			}
			if (response.status === 503) {
				this.phase = "unavailable"
				return
			}
			if (response.status !== 200) {
				this.fail(`challenge fetch failed (${response.status})`, () =>
					void this.fetchChallenge(),
				)
				return
			}
			this.challenge = (await response.json()) as ChallengeWire
			this.phase = "challenge"
			this.startCountdown()
		} catch {
			if (this.sessionId === sid) {
				this.fail("network failure while fetching the challenge", () =>
					void this.fetchChallenge(),
				)
			}
		} finally {
			this.inFlight = false
			this.render()
		}
	}

	async submitAnswer(): Promise<void> {
		if (this.inFlight || !this.session || this.phase !== "challenge") return
		const input = this.container.querySelector<HTMLInputElement>(".rgate-answer")
		const answer = input ? input.value.trim() : ""
		if (!answer) {
			// Client-side block: empty answers never leave the page.
			this.statusNote = "Type an answer first."
			this.render()
			return
		}
		const sid = this.session.session_id
		this.inFlight = true
		this.statusNote = ""
		this.stopCountdown()
		let next: "resource" | "challenge" | "stop" = "stop"
		try {
			const response = await this.fetchImpl(
				this.url(`/gate/sessions/${sid}/answer`),
				{
					method: "POST",
					headers: { "Content-Type": "application/json" },
					body: JSON.stringify({ response: answer }),
				},
			)
			if (this.sessionId !== sid) return
			if (response.status === 410) {
				this.phase = "expired"
				return
			}
			if (response.status !== 200) {
				this.fail(`answer submission failed (${response.status})`, () =>
					void this.submitAnswer(),
				)
				return
			}
			this.answersEntered.push(answer)
			const outcome = (await response.json()) as AnswerOutcome
			this.lastFeedback = outcome.correct ?? null
			if (outcome.decision) {
				this.decision = outcome.decision
				this.phase = outcome.decision.granted ? "granted" : "denied"
				next = outcome.decision.token ? "resource" : "stop"
			} else {
				this.challenge = null
				next = "challenge"
			}
		} catch {
			if (this.sessionId === sid) {
				this.fail("network failure while submitting", () => void this.submitAnswer())
			}
			return
		} finally {
			this.inFlight = false
			this.render()
		}
		if (next === "resource" && this.decision?.token) {
			await this.fetchResource(this.decision.token)
		} else if (next === "challenge") {
			await this.fetchChallenge()
		}
	}

	private async fetchResource(token: string): Promise<void> {
		const path = this.options.resourcePath ?? "demo.txt"
		try {
			const response = await this.fetchImpl(this.url(`/protected/${path}`), {
				method: "GET",
				headers: { Authorization: `Bearer ${token}` },
			})
			if (response.status === 200) {
				this.resourceBody = await response.text()
			} else {
				this.statusNote = `resource fetch failed (${response.status})`
			}
		} catch {
			this.statusNote = "network failure while fetching the resource"
		}
		this.render()
	}

	// -- local state ----------------------------------------------------------

	restart(): void {
		void this.start()
	}

	private reset(): void {
		this.session = null
		this.challenge = null
		this.decision = null
		this.resourceBody = null
		this.lastFeedback = null
		this.statusNote = ""
		this.retryAction = null
		this.answersEntered.length = 0
		this.stopCountdown()
	}

	private fail(message: string, retry: () => void): void {
		this.phase = "error"
		this.statusNote = message
		this.retryAction = retry
	}

	private startCountdown(): void {
		this.stopCountdown()
		const deadline = this.session?.per_challenge_deadline
		if (deadline == null) return
		this.countdownLeft = Math.ceil(deadline)
		this.countdownTimer = setInterval(() => {
			if (this.countdownLeft !== null && this.countdownLeft > 0) {
				this.countdownLeft -= 1
				this.render()
			}
		}, 1000)
	}

	private stopCountdown(): void {
		if (this.countdownTimer !== null) {
			clearInterval(this.countdownTimer)
			this.countdownTimer = null
		}
		this.countdownLeft = null
	}

	// -- rendering ------------------------------------------------------------

	private render(): void {
		const root = this.container
		root.textContent = ""
		root.classList.add("rgate-widget")
		root.dataset.phase = this.phase
		if (this.phase === "challenge" && this.challenge) {
			root.dataset.challengeId = this.challenge.challenge_id
		} else {
			delete root.dataset.challengeId
		}

		const status = el("div", "rgate-status")
		root.appendChild(status)

		switch (this.phase) {
			case "idle": {
				status.textContent = "Solve a short puzzle gate to access this resource."
				const button = el("button", "rgate-start", "Start")
				button.addEventListener("click", () => void this.start())
				root.appendChild(button)
				break
			}
			case "working":
				status.textContent = "Working..."
				break
			case "unavailable":
				status.textContent = "The gate is unavailable right now. Try again later."
				break
			case "expired": {
				status.textContent = "This session has ended."
				const button = el("button", "rgate-restart", "Start over")
				button.addEventListener("click", () => this.restart())
				root.appendChild(button)
				break
			}
			case "error": {
				status.textContent = this.statusNote || "Something went wrong."
				const button = el("button", "rgate-retry", "Retry")
				button.addEventListener("click", () => this.retryAction?.())
				root.appendChild(button)
				break
			}
			case "challenge": {
				if (!this.session || !this.challenge) break
				status.textContent = `Challenge ${this.challenge.number} of ${this.session.t_num}`
				if (this.lastFeedback !== null) {
					root.appendChild(
						el(
							"div",
							this.lastFeedback ? "rgate-feedback rgate-ok" : "rgate-feedback rgate-bad",
							this.lastFeedback ? "Previous answer: correct" : "Previous answer: incorrect",
						),
					)
				}
				if (this.countdownLeft !== null) {
					root.appendChild(
						el("div", "rgate-countdown", `${this.countdownLeft}s remaining`),
					)
				}
				root.appendChild(el("p", "rgate-preamble", this.challenge.preamble))
				const list = el("ul", "rgate-clues")
				for (const clue of this.challenge.clues) {
					list.appendChild(el("li", "rgate-clue", `${clue.domain}: ${clue.text}`))
				}
				root.appendChild(list)
				const input = el("input", "rgate-answer") as HTMLInputElement
				input.type = "text"
				input.placeholder = "your answer"
				root.appendChild(input)
				const button = el("button", "rgate-submit", "Submit")
				button.addEventListener("click", () => void this.submitAnswer())
				input.addEventListener("keydown", (event) => {
					if ((event as KeyboardEvent).key === "Enter") void this.submitAnswer()
				})
				root.appendChild(button)
				if (this.statusNote) {
					root.appendChild(el("div", "rgate-note", this.statusNote))
				}
				break
			}
			case "granted": {
				const decision = this.decision
				status.textContent = `Access granted (${decision?.correct_count}/${decision?.sent_count} correct).`
				root.classList.add("rgate-granted")
				if (this.resourceBody !== null) {
					root.appendChild(el("pre", "rgate-resource", this.resourceBody))
				} else if (this.statusNote) {
					root.appendChild(el("div", "rgate-note", this.statusNote))
				}
				break
			}
			case "denied": {
				const decision = this.decision
				status.textContent = `Access denied (${decision?.correct_count}/${decision?.sent_count} correct).`
				root.classList.add("rgate-denied")
				const button = el("button", "rgate-restart", "Try again")
				button.addEventListener("click", () => this.restart())
				root.appendChild(button)
				break
			}
		}
	}
}

function el(tag: string, className: string, text?: string): HTMLElement {
	const node = document.createElement(tag)
	node.className = className
	if (text !== undefined) node.textContent = text
	return node
}

export function mount(
	container: HTMLElement,
	serverBaseUrl: string | WidgetOptions,
): GateWidget {
	const options =
		typeof serverBaseUrl === "string" ? { serverBaseUrl } : serverBaseUrl
	return new GateWidget(container, options)
}

// Mounts every element carrying data-rgate-server; honors data-auto-start
// and data-resource-path.
export function mountAll(root: Document | HTMLElement = document): GateWidget[] {
	const nodes = root.querySelectorAll<HTMLElement>("[data-rgate-server]")
	const widgets: GateWidget[] = []
	nodes.forEach((node) => {
		widgets.push(
			new GateWidget(node, {
				serverBaseUrl: node.dataset.rgateServer ?? "",
				autoStart: node.dataset.autoStart === "true",
				resourcePath: node.dataset.resourcePath,
			}),
		)
	})
	return widgets
}
